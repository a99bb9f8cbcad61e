use rand::Rng;

use super::Real;

/// Handle of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
}

/// Owns every trainable tensor of a model together with its gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "parameter value does not match its shape");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![T::zero(); value.len()],
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, shape, vec![T::zero(); numel])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], v: T) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, shape, vec![v; numel])
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let value = (0..numel)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    /// Simultaneous mutable value and shared gradient access, used by optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &[T]) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Copies every value out, e.g. for an early-stopping snapshot.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<T>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot from a different model");
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value.copy_from_slice(v);
        }
    }

    /// Global L2 norm over all gradient buffers, accumulated in `f64`.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = *g * factor);
        }
    }
}
