//! Named parameter storage with per-parameter optimizer state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, ScobError};
use crate::rng::SeedRng;

/// One trainable array plus its adaptive-moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Param {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n = values.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            shape,
            values,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![0.0; n])
    }
}

/// Ordered name -> parameter map. BTreeMap keeps iteration deterministic,
/// which serialization and the momentum update rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) {
        self.map.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| ScobError::Contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| ScobError::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.map.values().map(|p| p.values.len()).sum()
    }

    /// True when both sets have identical names and shapes.
    pub fn same_structure(&self, other: &ParamSet) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((na, pa), (nb, pb))| na == nb && pa.shape == pb.shape)
    }

    /// Order-insensitive fingerprint of the parameter values; used by
    /// read-only contracts in tests.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.map {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in &p.values {
                h = (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}

/// Uniform init in [-limit, limit] with limit = sqrt(6 / fan_in); pairs
/// with the rectifier nonlinearity of the backbone.
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SeedRng) -> Param {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Param::new(shape, values)
}

/// Uniform init in [-limit, limit] with limit = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> Param {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Param::new(shape, values)
}

/// Small uniform init for embedding tables.
pub fn embedding_uniform(shape: Vec<usize>, rng: &mut SeedRng) -> Param {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
    Param::new(shape, values)
}
