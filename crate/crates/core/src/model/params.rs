use std::collections::HashMap;

use rand::Rng;

use super::{ModelError, Result};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LORA_A_SUFFIX: &str = ".lora_a";
pub const LORA_B_SUFFIX: &str = ".lora_b";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Base,
    LoraA,
    LoraB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Named parameters in a fixed insertion order. The trainable mask is each
/// tensor's `requires_grad` flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
    ) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, tensor, kind });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.position(name).map(move |i| &mut self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| ModelError::UnknownParam(name.to_owned()))
    }

    pub fn by_index(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter as a tape leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.entries.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Registers every parameter as a constant; nothing collects gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|p| tape.constant(&p.tensor))
                .collect(),
        }
    }

    /// Like [`ParamStore::bind`] but with selected parameters replaced by
    /// caller-provided nodes (used by gradient checks).
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(usize, Var)]) -> Binding {
        let mut b = self.bind(tape);
        for &(i, v) in overrides {
            b.vars[i] = v;
        }
        b
    }
}

/// Tape nodes for every parameter of one forward pass, aligned with store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Low-rank factors adapting a frozen weight `W[d×k]`: `W' = W + a·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub target: String,
}

impl LoRAAdapter {
    /// `a ~ N(0, std²)`, `b = 0`, so the adapted weight starts equal to the base.
    pub fn init(
        target: impl Into<String>,
        d: usize,
        k: usize,
        rank: usize,
        std: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > d.min(k) {
            return Err(ModelError::Config(format!(
                "lora rank {rank} must be in 1..={}",
                d.min(k)
            )));
        }
        Ok(Self {
            a: Tensor::randn(&[d, rank], std, rng),
            b: Tensor::zeros(&[rank, k]),
            target: target.into(),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// `W + a·b`, leaving `W` untouched.
pub fn effective_weight(w: &Tensor, adapter: &LoRAAdapter) -> Result<Tensor> {
    let (d, k) = match *w.shape() {
        [d, k] => (d, k),
        ref s => {
            return Err(TensorError::ShapeMismatch {
                op: "effective_weight",
                lhs: s.to_vec(),
                rhs: vec![],
            }
            .into())
        }
    };
    let r = adapter.rank();
    if adapter.a.shape() != [d, r] || adapter.b.shape() != [r, k] {
        return Err(TensorError::ShapeMismatch {
            op: "effective_weight",
            lhs: vec![d, k],
            rhs: [adapter.a.shape(), adapter.b.shape()].concat(),
        }
        .into());
    }
    let delta = adapter.a.matmul(&adapter.b)?;
    Ok(w.add(&delta)?)
}

/// Trainable entries of a rank-`r` adapter on a `d×k` weight: `r·(d+k)`.
pub fn lora_param_count(d: usize, k: usize, r: usize) -> usize {
    r * (d + k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_a_keeps_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let adapter = LoRAAdapter {
            a: Tensor::zeros(&[6, 2]),
            b: Tensor::randn(&[2, 5], 1.0, &mut rng),
            target: "w".into(),
        };
        let w2 = effective_weight(&w, &adapter).unwrap();
        assert!(w2.bit_eq(&w));
    }

    #[test]
    fn zero_base_gives_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let adapter = LoRAAdapter {
            a: Tensor::randn(&[4, 3], 1.0, &mut rng),
            b: Tensor::randn(&[3, 5], 1.0, &mut rng),
            target: "w".into(),
        };
        let w2 = effective_weight(&Tensor::zeros(&[4, 5]), &adapter).unwrap();
        assert!(w2.bit_eq(&adapter.a.matmul(&adapter.b).unwrap()));
    }

    #[test]
    fn adapter_shape_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adapter = LoRAAdapter::init("w", 4, 4, 2, 0.02, &mut rng).unwrap();
        assert!(effective_weight(&Tensor::zeros(&[5, 4]), &adapter).is_err());
        assert!(LoRAAdapter::init("w", 4, 4, 5, 0.02, &mut rng).is_err());
        assert!(LoRAAdapter::init("w", 4, 4, 0, 0.02, &mut rng).is_err());
    }

    #[test]
    fn parameter_ratio() {
        let lora = lora_param_count(64, 64, 8);
        assert_eq!(lora, 1024);
        assert_eq!(lora as f64 / (64.0 * 64.0), 0.25);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1]), ParamKind::Base).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[1]), ParamKind::Base),
            Err(ModelError::DuplicateParam(_))
        ));
    }
}
