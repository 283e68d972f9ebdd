use rand::Rng;

use super::WeakVariant;
use crate::error::{Error, Result};
use crate::phoneme::P;
use crate::tensor::params::{fan_in_init, truncated_normal};
use crate::tensor::{ParamGroup, ParamStore, Real, Tensor, Var};
use crate::unet::ForwardCtx;

/// Layer widths of a weak control network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakControlConfig {
    pub variant: WeakVariant,
    pub dense: [usize; 3],
    /// Width of each head: one value per conditioned block (simple) or one
    /// per channel of each conditioned block (complex).
    pub head: usize,
}

impl WeakControlConfig {
    pub fn new(variant: WeakVariant, channels: &[usize]) -> Self {
        let (dense, head) = match variant {
            WeakVariant::Simple => ([32, 64, 128], channels.len()),
            WeakVariant::Complex => ([64, 256, 1024], channels.iter().sum()),
        };
        WeakControlConfig { variant, dense, head }
    }

    /// Register the control-network parameters in `store`.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let g = ParamGroup::Control;
        store.insert("control.alpha", Tensor::full(vec![P], T::one()), true, g);
        let mut fan_in = P;
        for (i, &width) in self.dense.iter().enumerate() {
            store.insert(format!("control.dense{i}.w"), fan_in_init(&[fan_in, width], fan_in, rng), true, g);
            store.insert(format!("control.dense{i}.b"), Tensor::zeros(vec![width]), true, g);
            if i > 0 {
                let bn = format!("control.bn{i}");
                store.insert(format!("{bn}.gamma"), Tensor::ones(vec![width]), true, g);
                store.insert(format!("{bn}.beta"), Tensor::zeros(vec![width]), true, g);
                store.insert(format!("{bn}.mean"), Tensor::zeros(vec![width]), false, g);
                store.insert(format!("{bn}.var"), Tensor::ones(vec![width]), false, g);
            }
            fan_in = width;
        }
        // heads start near the identity modulation
        store.insert("control.gamma_head.w", truncated_normal(&[fan_in, self.head], 0.0, 0.01, rng), true, g);
        store.insert("control.gamma_head.b", Tensor::ones(vec![self.head]), true, g);
        store.insert("control.beta_head.w", truncated_normal(&[fan_in, self.head], 0.0, 0.01, rng), true, g);
        store.insert("control.beta_head.b", Tensor::zeros(vec![self.head]), true, g);
    }

    /// Raw binary `z [B, N, P]` to head outputs `(gamma [B, head], beta [B, head])`.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &mut ForwardCtx<'_, 't, T>,
        z: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = z.shape();
        if shape.len() != 3 || shape[2] != P {
            return Err(Error::shape("weak_control", format!("z {shape:?} must be [B, N, {P}]")));
        }
        let mut h = z.autopool(ctx.p("control.alpha")?)?;
        h = ctx.dense("control.dense0", h)?.relu();
        for i in 1..3 {
            h = ctx.dense(&format!("control.dense{i}"), h)?;
            h = ctx.dropout(h, 0.5)?;
            h = ctx.batch_norm(&format!("control.bn{i}"), h)?.relu();
        }
        let gamma = ctx.dense("control.gamma_head", h)?;
        let beta = ctx.dense("control.beta_head", h)?;
        Ok((gamma, beta))
    }
}
