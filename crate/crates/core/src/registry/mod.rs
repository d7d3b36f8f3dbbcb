//! Named parameters, freezing and exact parameter accounting.

pub mod counting;

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::petl::Mechanism;
use crate::tensor::{Tape, Tensor, Var};

/// Who owns a parameter. Freezing and reporting are driven by this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Head,
    Petl(Mechanism),
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Backbone => f.write_str("backbone"),
            Group::Head => f.write_str("head"),
            Group::Petl(m) => write!(f, "petl:{m}"),
        }
    }
}

/// Initial value rule for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Index of a parameter in the sink that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Shape-only description of a parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub path: String,
    pub shape: Vec<usize>,
    pub group: Group,
}

impl ParamInfo {
    pub fn count(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// Receives parameter declarations from model construction. The same
/// construction code can then allocate weights or only record shapes.
pub trait ParamSink {
    fn add(&mut self, path: String, shape: Vec<usize>, group: Group, init: Init) -> Result<ParamId>;
}

fn check_declaration(path: &str, shape: &[usize], taken: bool) -> Result<()> {
    if taken {
        return Err(Error::config(format!("duplicate parameter path `{path}`")));
    }
    if shape.contains(&0) {
        return Err(Error::config(format!(
            "parameter `{path}` has an empty shape {shape:?}"
        )));
    }
    Ok(())
}

/// Records parameter shapes without allocating any data. Used to count
/// full-size models.
#[derive(Debug, Default)]
pub struct Layout {
    params: Vec<ParamInfo>,
    index: HashMap<String, usize>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn into_params(self) -> Vec<ParamInfo> {
        self.params
    }
}

impl ParamSink for Layout {
    fn add(&mut self, path: String, shape: Vec<usize>, group: Group, _init: Init) -> Result<ParamId> {
        check_declaration(&path, &shape, self.index.contains_key(&path))?;
        let id = self.params.len();
        self.index.insert(path.clone(), id);
        self.params.push(ParamInfo { path, shape, group });
        Ok(ParamId(id))
    }
}

/// A named tensor owned by a model.
#[derive(Clone, Debug)]
pub struct Parameter {
    path: String,
    group: Group,
    tensor: Tensor,
}

impl Parameter {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn count(&self) -> u64 {
        self.tensor.len() as u64
    }

    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.tensor.set_requires_grad(!frozen);
    }

    pub fn info(&self) -> ParamInfo {
        ParamInfo {
            path: self.path.clone(),
            shape: self.shape().to_vec(),
            group: self.group,
        }
    }
}

/// Which parameters a count covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Trainable,
    Frozen,
    PathPrefix(String),
}

impl CountFilter {
    fn keep(&self, p: &Parameter) -> bool {
        match self {
            CountFilter::All => true,
            CountFilter::Trainable => !p.frozen(),
            CountFilter::Frozen => p.frozen(),
            CountFilter::PathPrefix(prefix) => p.path.starts_with(prefix.as_str()),
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for the parameter at `path`. Each parameter draws from its own
/// stream, so adding PETL modules leaves backbone weights untouched.
pub fn param_seed(seed: u64, path: &str) -> u64 {
    fnv1a(path.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Ordered collection of every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParameterRegistry {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamSink for ParameterRegistry {
    fn add(&mut self, path: String, shape: Vec<usize>, group: Group, init: Init) -> Result<ParamId> {
        check_declaration(&path, &shape, self.index.contains_key(&path))?;
        let tensor = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, 1.0),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(param_seed(self.seed, &path));
                Tensor::randn(&shape, std, &mut rng)
            }
        };
        Ok(self.insert(path, group, tensor.with_requires_grad(true)))
    }
}

impl ParameterRegistry {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Registers an explicit tensor. Its `requires_grad` flag is kept.
    pub fn register(&mut self, path: impl Into<String>, group: Group, tensor: Tensor) -> Result<ParamId> {
        let path = path.into();
        check_declaration(&path, tensor.shape(), self.index.contains_key(&path))?;
        Ok(self.insert(path, group, tensor))
    }

    fn insert(&mut self, path: String, group: Group, tensor: Tensor) -> ParamId {
        let id = self.params.len();
        self.index.insert(path.clone(), id);
        self.params.push(Parameter {
            path,
            group,
            tensor,
        });
        ParamId(id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied().map(ParamId)
    }

    pub fn by_path(&self, path: &str) -> Option<&Parameter> {
        self.id_of(path).map(|id| self.get(id))
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Parameter> {
        self.id_of(path).map(|id| &mut self.params[id.0])
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.params.iter().map(Parameter::info).collect()
    }

    pub fn count(&self, filter: &CountFilter) -> u64 {
        self.params
            .iter()
            .filter(|p| filter.keep(p))
            .map(Parameter::count)
            .sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.count(&CountFilter::Trainable)
    }

    pub fn total_count(&self) -> u64 {
        self.count(&CountFilter::All)
    }

    /// Freezes the backbone, unfreezes every PETL parameter and sets the
    /// head according to `tune_head`.
    pub fn freeze_backbone(&mut self, tune_head: bool) {
        for p in &mut self.params {
            let frozen = match p.group {
                Group::Backbone => true,
                Group::Head => !tune_head,
                Group::Petl(_) => false,
            };
            p.set_frozen(frozen);
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.set_frozen(false));
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| !self.params[i].frozen())
            .map(ParamId)
            .collect()
    }

    /// Places every parameter on `tape` as a leaf, in registry order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Like [`bind`](Self::bind) with `replacement` standing in for the
    /// parameter `id`.
    pub(crate) fn bind_replacing<'t>(&self, tape: &'t Tape, id: ParamId, replacement: &Tensor) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.leaf(if i == id.0 { replacement } else { &p.tensor }))
                .collect(),
        }
    }

    /// Copies gradients from a finished backward pass onto the trainable
    /// parameters. Trainable parameters the loss did not reach get zeros.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound<'_>) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            if p.frozen() {
                continue;
            }
            let grad = tape
                .take_grad(*var)
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            p.tensor.set_grad(Some(grad)).expect("gradient matches parameter shape");
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies of every frozen tensor, keyed by path.
    pub fn frozen_snapshot(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.frozen())
            .map(|p| (p.path.clone(), p.tensor.clone()))
            .collect()
    }
}

/// Registry parameters placed on one tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_empty_paths_rejected() {
        let mut reg = ParameterRegistry::new(0);
        reg.add("a".into(), vec![2], Group::Backbone, Init::Zeros).unwrap();
        assert!(reg.add("a".into(), vec![2], Group::Backbone, Init::Zeros).is_err());
        assert!(reg.add("b".into(), vec![0, 3], Group::Head, Init::Zeros).is_err());
        let mut layout = Layout::new();
        layout.add("a".into(), vec![2], Group::Head, Init::Ones).unwrap();
        assert!(layout.add("a".into(), vec![1], Group::Head, Init::Ones).is_err());
    }

    #[test]
    fn per_path_seeding_is_order_independent() {
        let mut a = ParameterRegistry::new(7);
        a.add("x".into(), vec![3], Group::Backbone, Init::Normal(1.0)).unwrap();
        a.add("y".into(), vec![3], Group::Backbone, Init::Normal(1.0)).unwrap();
        let mut b = ParameterRegistry::new(7);
        b.add("y".into(), vec![3], Group::Backbone, Init::Normal(1.0)).unwrap();
        assert!(a.by_path("y").unwrap().tensor().bitwise_eq(b.by_path("y").unwrap().tensor()));
        assert!(!a.by_path("x").unwrap().tensor().bitwise_eq(a.by_path("y").unwrap().tensor()));
    }

    #[test]
    fn freeze_and_partition() {
        let mut reg = ParameterRegistry::new(0);
        reg.add("bb".into(), vec![4, 4], Group::Backbone, Init::Zeros).unwrap();
        reg.add("head".into(), vec![4], Group::Head, Init::Zeros).unwrap();
        reg.add("ad".into(), vec![2, 4], Group::Petl(Mechanism::AdapterParallel), Init::Zeros)
            .unwrap();
        reg.freeze_backbone(false);
        assert_eq!(reg.trainable_count(), 8);
        reg.freeze_backbone(true);
        assert_eq!(reg.trainable_count(), 12);
        assert_eq!(
            reg.count(&CountFilter::Trainable) + reg.count(&CountFilter::Frozen),
            reg.total_count()
        );
        assert_eq!(reg.count(&CountFilter::PathPrefix("h".into())), 4);
    }
}
