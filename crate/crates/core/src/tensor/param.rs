use std::collections::HashMap;

use super::{Checkpoint, Grads, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Sets the frozen flag on every parameter under `prefix.`; returns how
    /// many matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let dotted = format!("{prefix}.");
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(&dotted) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).count()
    }

    /// Registers every parameter as a borrowed leaf. Frozen parameters do not
    /// request gradients. The returned vector is indexed by [`ParamId`].
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.borrowed(&p.tensor, !p.frozen))
            .collect()
    }

    pub fn collect_grads(&self, bound: &[Var], grads: &mut Grads) -> ParamGrads {
        ParamGrads {
            grads: bound.iter().map(|&v| grads.take(v)).collect(),
        }
    }

    /// Replaces tensor values from `ckpt`. Names are translated by replacing a
    /// leading `from.` with `to.`; every translated name must exist with a
    /// matching shape. Returns the number of tensors loaded.
    pub fn load(&mut self, ckpt: &Checkpoint, from: &str, to: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in ckpt.iter() {
            let Some(rest) = name.strip_prefix(from).and_then(|r| r.strip_prefix('.')) else {
                continue;
            };
            let target = format!("{to}.{rest}");
            let id = self.id(&target).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor `{name}` has no counterpart `{target}`"))
            })?;
            let p = self.get_mut(id);
            if p.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
            n += 1;
        }
        let expected = self.params.iter().filter(|p| p.name.starts_with(&format!("{to}."))).count();
        if n != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint provided {n} of {expected} `{to}.*` tensors"
            )));
        }
        Ok(n)
    }

    /// Snapshot of the parameters under `prefix` (all if `None`).
    pub fn checkpoint(&self, prefix: Option<&str>) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for p in &self.params {
            if prefix.map_or(true, |pre| p.name.starts_with(&format!("{pre}."))) {
                ckpt.insert(p.name.clone(), p.tensor.clone());
            }
        }
        ckpt
    }
}

/// Gradients indexed by [`ParamId`]; `None` where a parameter received none.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn empty(n: usize) -> Self {
        ParamGrads {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) {
        self.grads[id.0] = Some(t);
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine, theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (slot @ None, Some(b)) => *slot = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        self.grads.iter_mut().flatten().for_each(|t| t.scale_assign(k));
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}
