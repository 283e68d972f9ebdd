use indexmap::IndexMap;

use super::{cast, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use super::Gradients;

pub const DEFAULT_LR: f64 = 1e-3;

/// Adam moment buffers and schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
}

/// Adaptive-moment optimizer. The learning rate can be rescaled externally
/// (for reduce-on-plateau) through [`Adam::set_lr`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    state: OptimizerState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            state: OptimizerState {
                step: 0,
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-7,
                first: IndexMap::new(),
                second: IndexMap::new(),
            },
        }
    }

    pub fn from_state(state: OptimizerState<T>) -> Self {
        Adam { state }
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Update every trainable parameter in `store`. Parameters without a
    /// gradient entry are treated as having zero gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in &names {
            if let Some(g) = grads.param(name) {
                if g.shape() != store.tensor(name)?.shape() {
                    return Err(Error::shape(
                        "optimizer_step",
                        format!("gradient for `{name}` is {:?}", g.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - st.beta1.powi(t);
        let c2 = 1.0 - st.beta2.powi(t);
        let (b1, b2): (T, T) = (cast(st.beta1), cast(st.beta2));
        let (ob1, ob2): (T, T) = (cast(1.0 - st.beta1), cast(1.0 - st.beta2));
        let step_size: T = cast(st.lr / c1);
        let inv_c2: T = cast(1.0 / c2);
        let eps: T = cast(st.eps);
        for name in names {
            let Some(g) = grads.param(&name) else {
                // zero gradient still decays the moments
                if let (Some(m), Some(v)) = (st.first.get_mut(&name), st.second.get_mut(&name)) {
                    m.data_mut().iter_mut().for_each(|x| *x *= b1);
                    v.data_mut().iter_mut().for_each(|x| *x *= b2);
                }
                continue;
            };
            let shape = g.shape().to_vec();
            let m = st.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = st.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let p = store.tensor_mut(&name)?;
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ParamGroup, Tape};
    use super::*;

    fn quadratic_step(adam: &mut Adam<f64>, store: &mut ParamStore<f64>, target: f64) -> f64 {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let w = p.get("w").unwrap();
        let c = tape.constant(Tensor::scalar(target));
        let d = w.sub(c).unwrap();
        let loss = d.mul(d).unwrap().sum();
        let value = loss.value().item();
        let g = tape.backward(loss).unwrap();
        adam.step(store, &g).unwrap();
        value
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64([2], &[0.5, -0.5]).unwrap(), true, ParamGroup::Backbone);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let loss = p.get("w").unwrap().scale(0.0).sum();
        let g = tape.backward(loss).unwrap();
        let mut adam = Adam::new(DEFAULT_LR);
        adam.step(&mut store, &g).unwrap();
        assert_eq!(store.tensor("w").unwrap().data(), &[0.5, -0.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // (w - 1)^2 from w = 0 with lr 0.01
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0), true, ParamGroup::Backbone);
        let mut adam = Adam::new(0.01);
        let mut last = f64::INFINITY;
        for i in 0..500 {
            last = quadratic_step(&mut adam, &mut store, 1.0);
            assert_eq!(adam.step_count(), i + 1);
        }
        let w = store.tensor("w").unwrap().item();
        assert!((w - 1.0).powi(2) < 1e-6, "w = {w}, last loss {last}");
    }

    #[test]
    fn nan_gradient_rejected_without_update() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(1.0), true, ParamGroup::Backbone);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let nan = tape.constant(Tensor::scalar(f32::NAN));
        let loss = p.get("w").unwrap().mul(nan).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let mut adam = Adam::new(DEFAULT_LR);
        assert!(matches!(adam.step(&mut store, &g), Err(Error::NonFiniteGradient(n)) if n == "w"));
        assert_eq!(store.tensor("w").unwrap().item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
