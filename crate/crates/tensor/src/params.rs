use crate::scalar::Float;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; trained when `requires_grad` is set.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

/// A named tensor with optional gradient buffer.
///
/// `grad`, when present, always has the shape of `value`; entries with
/// `requires_grad == false` never receive one.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

impl<T: Float> Parameter<T> {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad && self.kind == ParamKind::Weight
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }
}

/// Flat arena of every tensor a model owns. Modules hold [`ParamId`]s.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Parameter<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, ParamKind::Weight)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Parameter {
            name,
            value,
            kind,
            requires_grad: kind == ParamKind::Weight,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        let p = &mut self.entries[id.0];
        p.requires_grad = flag;
        if !flag {
            p.grad = None;
        }
    }

    /// Sets `requires_grad` on every weight whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for i in 0..self.entries.len() {
            if self.entries[i].name.starts_with(prefix) {
                self.set_requires_grad(ParamId(i), flag);
            }
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| p.requires_grad()).map(|(id, _)| id)
    }

    /// Accumulates `g` into the gradient of `id`. Ignored for frozen entries.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        let p = &mut self.entries[id.0];
        if !p.requires_grad() {
            return;
        }
        assert_eq!(p.value.shape(), g.shape(), "gradient shape mismatch for {}", p.name);
        match p.grad.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn take_grad(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.entries[id.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.grad = None;
        }
    }

    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Converts every entry to another element type, keeping flags.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    requires_grad: p.requires_grad,
                    grad: None,
                })
                .collect(),
        }
    }
}
