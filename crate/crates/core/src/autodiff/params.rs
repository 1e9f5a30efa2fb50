use std::collections::HashMap;

use rand::Rng;

use super::{Array, AutodiffError, Scalar};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization scheme for a freshly registered parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Glorot uniform over the given fan-in/fan-out.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// He uniform for ReLU stacks.
    He {
        fan_in: usize,
    },
}

impl Init {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        let uniform = |rng: &mut dyn rand::RngCore, bound: f64| rng.gen_range(-bound..=bound);
        match self {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Uniform(b) => uniform(rng, b),
            Init::Xavier { fan_in, fan_out } => {
                uniform(rng, (6.0 / (fan_in + fan_out).max(1) as f64).sqrt())
            }
            Init::He { fan_in } => uniform(rng, (6.0 / fan_in.max(1) as f64).sqrt()),
        }
    }
}

/// Named, ordered collection of learnable arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: Array<T>) -> Result<ParamId, AutodiffError> {
        if self.index.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<ParamId, AutodiffError> {
        let n: usize = shape.iter().product();
        // Values are drawn in f64 so both precisions see identical initial weights.
        let data = (0..n).map(|_| T::of(init.sample(rng))).collect();
        self.insert(name, Array::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array<T>)> + '_ {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.arrays[id.0]))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Scalar parameter count over names starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, a)| a.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
            index: self.index.clone(),
        }
    }
}
