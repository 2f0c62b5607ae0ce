use std::collections::BTreeMap;

use rand::Rng;

use super::array::Tensor;
use super::graph::{BatchStats, Graph, Var};
use crate::error::{Error, Result};

/// Momentum of running-statistic updates in batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named parameters keyed by dot-separated path, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Consistency(format!("duplicate parameter path {path}")));
        }
        self.entries.insert(
            path,
            Param {
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    /// Inserts or replaces an entry.
    pub fn set(&mut self, path: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(
            path.into(),
            Param {
                value,
                grad: None,
                trainable,
            },
        );
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Paths under `prefix.` (or equal to `prefix`).
    pub fn paths_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.keys().map(String::as_str).filter(move |p| {
            p.strip_prefix(prefix)
                .is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
        })
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        let doomed: Vec<String> = self.paths_with_prefix(prefix).map(str::to_owned).collect();
        for p in doomed {
            self.entries.remove(&p);
        }
    }

    /// Copies every entry of `other` under the same paths.
    pub fn extend_from(&mut self, other: &ParamSet) {
        for (k, v) in other.iter() {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Checksum over paths and values (gradients excluded).
    pub fn checksum(&self) -> u64 {
        let mut h = super::array::Fnv::new();
        for (k, p) in &self.entries {
            h.write(k.as_bytes());
            h.write(&[p.trainable as u8]);
            h.write(&p.value.checksum().to_le_bytes());
        }
        h.finish()
    }

    // ----- initializers -----------------------------------------------------

    /// He-normal conv weight `[cout, cin, k, k]`, no bias.
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::randn(&[cout, cin, k, k], std, rng),
            true,
        )
    }

    /// Fully-connected layer: He-normal weight `[out, in]` and zero bias.
    pub fn add_linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        out: usize,
        inp: usize,
        rng: &mut R,
    ) -> Result<()> {
        let std = (2.0 / inp as f64).sqrt();
        self.insert(format!("{prefix}.weight"), Tensor::randn(&[out, inp], std, rng), true)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), true)
    }

    /// Batch norm affine parameters plus non-trainable running statistics.
    pub fn add_batch_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]), true)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), true)?;
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false)?;
        self.insert(format!("{prefix}.running_var"), Tensor::ones(&[c]), false)
    }

    pub fn add_layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]), true)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), true)
    }
}

/// Trainable scalar count.
pub fn count_params(params: &ParamSet) -> usize {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.value.numel())
        .sum()
}

/// Whether a forward pass runs in training or evaluation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A forward pass in progress: the tape plus the parameters bound to it.
pub struct Ctx<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<(String, BatchStats)>,
}

/// What a finished pass hands back to the owner of the parameters.
#[derive(Debug, Default)]
pub struct PassOutcome {
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamSet, mode: Mode, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: BTreeMap::new(),
            mode,
            track_grads,
            bn_updates: vec![],
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    /// Binds a parameter to the tape once; later calls return the same leaf.
    pub fn p(&mut self, path: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(path) {
            return Ok(*v);
        }
        let param = self
            .params
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))?;
        let v = self
            .graph
            .leaf(param.value.clone(), self.track_grads && param.trainable);
        self.bound.insert(path.to_owned(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.input(t)
    }

    pub(crate) fn record_bn(&mut self, prefix: &str, stats: BatchStats) {
        self.bn_updates.push((prefix.to_owned(), stats));
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Releases the tape, keeping gradients of bound parameters and pending
    /// running-statistic updates.
    pub fn finish(self) -> PassOutcome {
        let grads = self
            .bound
            .iter()
            .filter_map(|(k, v)| self.graph.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect();
        PassOutcome {
            grads,
            bn_updates: self.bn_updates,
        }
    }
}

impl PassOutcome {
    /// Stores gradients (replacing any previous ones) and folds batch
    /// statistics into running statistics.
    pub fn apply(self, params: &mut ParamSet) -> Result<()> {
        for (k, g) in self.grads {
            let p = params
                .get_mut(&k)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {k}")))?;
            p.grad = Some(g);
        }
        apply_bn_updates(params, &self.bn_updates)
    }
}

pub fn apply_bn_updates(params: &mut ParamSet, updates: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, stats) in updates {
        for (name, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let path = format!("{prefix}.{name}");
            let p = params
                .get_mut(&path)
                .ok_or_else(|| Error::Config(format!("missing running statistic {path}")))?;
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_params_cases() {
        assert_eq!(count_params(&ParamSet::new()), 0);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ps.add_conv("c", 64, 64, 3, &mut rng).unwrap();
        assert_eq!(count_params(&ps), 36864);
        ps.add_batch_norm("bn", 64).unwrap();
        // running statistics are buffers, not parameters
        assert_eq!(count_params(&ps), 36864 + 128);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut ps = ParamSet::new();
        ps.insert("a.b", Tensor::zeros(&[1]), true).unwrap();
        assert!(ps.insert("a.b", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let mut ps = ParamSet::new();
        for p in ["z", "a.b", "a", "m.x"] {
            ps.insert(p, Tensor::zeros(&[1]), true).unwrap();
        }
        let paths: Vec<&str> = ps.paths().collect();
        assert_eq!(paths, ["a", "a.b", "m.x", "z"]);
        let sub: Vec<&str> = ps.paths_with_prefix("a").collect();
        assert_eq!(sub, ["a", "a.b"]);
    }
}
