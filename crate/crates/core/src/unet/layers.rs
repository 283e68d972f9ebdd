use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::params::BoundParams;
use crate::tensor::{BatchNormStats, ParamStore, Real, Var};

/// Running-statistics momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-forward state shared by the backbone and the control network.
pub struct ForwardCtx<'a, 't, T: Real> {
    pub store: &'a ParamStore<T>,
    pub params: &'a BoundParams<'t, T>,
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
    /// Batch statistics observed in training mode, keyed by layer prefix.
    pub bn_updates: Vec<(String, BatchNormStats<T>)>,
}

impl<'a, 't, T: Real> ForwardCtx<'a, 't, T> {
    pub fn new(store: &'a ParamStore<T>, params: &'a BoundParams<'t, T>, train: bool, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            store,
            params,
            train,
            rng,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        self.params.get(name)
    }

    pub fn dense(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.dense(self.p(&format!("{prefix}.w"))?, self.p(&format!("{prefix}.b"))?)
    }

    /// Batch norm with `{prefix}.gamma/.beta` and running `{prefix}.mean/.var`.
    pub fn batch_norm(&mut self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mean = self.store.tensor(&format!("{prefix}.mean"))?;
        let var = self.store.tensor(&format!("{prefix}.var"))?;
        let (y, stats) = x.batch_norm(gamma, beta, Some((mean, var)), self.train)?;
        if let Some(s) = stats {
            self.bn_updates.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    pub fn dropout(&mut self, x: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        x.dropout(rate, self.train, self.rng)
    }
}

/// Fold observed batch statistics into the running averages.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[(String, BatchNormStats<T>)]) -> Result<()> {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let one_minus = T::one() - m;
    for (prefix, stats) in updates {
        for (suffix, batch) in [("mean", &stats.mean), ("var", &stats.var)] {
            let running = store.tensor_mut(&format!("{prefix}.{suffix}"))?;
            for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
                *r = m * *r + one_minus * b;
            }
        }
    }
    Ok(())
}
