use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor. Frozen parameters take no gradient and are
/// never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

/// Owns every parameter of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = vec![0.0; value.len()];
        self.params.push(Parameter { name, value, grad, frozen: false });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix with entries uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes everything, then unfreezes parameters whose name starts with
    /// one of `prefixes`.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.frozen = !prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.frozen = true);
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and value bits of parameters
    /// whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
