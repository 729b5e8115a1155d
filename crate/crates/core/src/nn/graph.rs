use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

/// A tape with lazily bound parameters from a [`ParamStore`].
///
/// Parameters are recorded as leaves the first time they are used; when
/// `trainable` is false they carry no gradient and the whole forward pass is
/// recorded without backward bookkeeping.
pub struct Graph<'p, E: Element> {
    pub tape: Tape<E>,
    params: &'p ParamStore<E>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, E: Element> Graph<'p, E> {
    pub fn new(params: &'p ParamStore<E>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn params(&self) -> &'p ParamStore<E> {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let t = self.params.tensor(i);
        let v = self.tape.input(t.shape(), t.data().to_vec(), self.trainable)?;
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        self.tape.constant(shape, data)
    }

    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.tape.backward(root)
    }

    /// Adds accumulated parameter gradients into `buf`.
    pub fn accumulate(&self, buf: &mut GradBuffer<E>) {
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.tape.grad(v)) {
                for (a, &x) in buf.grads[i].iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }
}

/// Gradient sums aligned with a [`ParamStore`]'s parameter order.
#[derive(Clone, Debug)]
pub struct GradBuffer<E: Element> {
    pub grads: Vec<Vec<E>>,
}

impl<E: Element> GradBuffer<E> {
    pub fn zeros(params: &ParamStore<E>) -> Self {
        Self {
            grads: params.iter().map(|(_, t)| vec![E::zero(); t.numel()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = E::zero()));
    }

    pub fn scale(&mut self, f: E) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = *x * f));
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}
