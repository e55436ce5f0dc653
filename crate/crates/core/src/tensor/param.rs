use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    /// Whether decoupled weight decay applies (weights yes, biases and norms no).
    pub decay: bool,
}

/// Ordered collection of named parameters. Order is registration order and is
/// the order used by checkpoints and the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<R> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    /// Adds a gradient set into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<R>) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<R> {
    slots: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn new() -> Self {
        Gradients { slots: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn add(&mut self, id: ParamId, grad: &Tensor<R>) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients<R>) {
        for (id, g) in other.iter() {
            self.add(id, g);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }

    pub fn scale(&mut self, s: R) {
        for g in self.slots.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}
