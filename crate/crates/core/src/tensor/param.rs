use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::array::{DenseArray, Real};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled until inside two standard deviations.
    TruncatedNormal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn weights() -> Self {
        Init::TruncatedNormal { std: INIT_STD }
    }

    fn sample<T: Real, R: Rng>(self, numel: usize, rng: &mut R) -> Vec<T> {
        match self {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::TruncatedNormal { std } => (0..numel)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * std);
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: DenseArray<T>,
    pub grad: Option<DenseArray<T>>,
    pub init: Init,
}

/// Owns every learnable array of a model, addressed by unique dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let numel = shape.iter().product();
        let value = DenseArray::new(shape.to_vec(), init.sample(numel, rng))?;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            init,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &DenseArray<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|x| *x = T::zero()),
                None => p.grad = Some(DenseArray::zeros(p.value.shape())),
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.numel() {
            return Err(Error::shape(format!(
                "gradient of length {} for parameter `{}` of shape {:?}",
                grad.len(),
                p.name,
                p.value.shape()
            )));
        }
        let g = p
            .grad
            .get_or_insert_with(|| DenseArray::zeros(p.value.shape()));
        for (acc, &x) in g.data_mut().iter_mut().zip(grad) {
            *acc = *acc + x;
        }
        Ok(())
    }

    pub fn set_value(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Same names and shapes with values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(store.add("w", &[2], Init::Zeros, &mut rng).is_err());
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", &[64, 64], Init::weights(), &mut rng)
            .unwrap();
        let v = store.value(id).data();
        assert!(v.iter().all(|x| x.abs() <= 2.0 * INIT_STD));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn zero_grad_creates_and_clears_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let id = store.add("b", &[3], Init::Ones, &mut rng).unwrap();
        assert!(store.get(id).grad.is_none());
        store.accumulate_grad(id, &[1.0, 2.0, 3.0]).unwrap();
        store.zero_grad();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[0.0; 3]);
    }
}
