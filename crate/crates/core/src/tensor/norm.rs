use super::{cast, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Per-channel statistics of the batch seen by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub const BN_EPSILON: f64 = 1e-5;

impl<'t, T: Real> Var<'t, T> {
    /// Batch normalization over every axis except the last (channel) one.
    ///
    /// In training mode the batch statistics are used and returned so the
    /// caller can update its running averages. In eval mode `running` must be
    /// supplied and is used instead. Zero-variance channels are stabilized by
    /// the additive epsilon and come out equal to `beta`.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running: Option<(&Tensor<T>, &Tensor<T>)>,
        train: bool,
    ) -> Result<(Var<'t, T>, Option<BatchNormStats<T>>)> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let c = *shape.last().unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} / beta {:?} must be [{c}] for input {shape:?}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.len() / c;
        let eps: T = cast(BN_EPSILON);
        let (mean, var) = if train {
            // accumulate in f64 so constant channels give exactly zero variance
            let mut mean = vec![0f64; c];
            for row in xv.data().chunks_exact(c) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v.as_f64());
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0f64; c];
            for row in xv.data().chunks_exact(c) {
                for ((s, v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v.as_f64() - m).powi(2);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean.into_iter().map(cast).collect::<Vec<T>>(), var.into_iter().map(cast).collect::<Vec<T>>())
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::InvalidArgument("batch_norm in eval mode needs running statistics".into())
            })?;
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::shape("batch_norm", format!("running stats must be [{c}]")));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            for ((&v, &m), &s) in row.iter().zip(&mean).zip(&inv_std) {
                xhat.push((v - m) * s);
            }
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xhat.chunks_exact(c) {
            for ((&h, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                out.push(g * h + b);
            }
        }
        let stats = train.then(|| BatchNormStats {
            mean: Tensor::from_parts(vec![c], mean),
            var: Tensor::from_parts(vec![c], var),
        });
        let out = Tensor::from_parts(shape.clone(), out);
        let var = self.tape().push(
            out,
            &[self.id(), gamma.id(), beta.id()],
            Box::new(move |g, needs| {
                // reductions and the centred correction in f64: for a bias
                // feeding this layer the true input gradient sums to zero
                let gd = g.data();
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        dbeta[j] += grow[j].as_f64();
                        dgamma[j] += grow[j].as_f64() * hrow[j].as_f64();
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = Vec::with_capacity(gd.len());
                    let scale: Vec<f64> = gv.data().iter().zip(&inv_std).map(|(g, s)| g.as_f64() * s.as_f64()).collect();
                    if train {
                        // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
                        let inv_rows = 1.0 / rows as f64;
                        for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let v = scale[j] * (grow[j].as_f64() - (dbeta[j] + hrow[j].as_f64() * dgamma[j]) * inv_rows);
                                dx.push(cast::<T>(v));
                            }
                        }
                    } else {
                        for grow in gd.chunks_exact(c) {
                            for j in 0..c {
                                dx.push(cast::<T>(grow[j].as_f64() * scale[j]));
                            }
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let (dgamma, dbeta): (Vec<T>, Vec<T>) = (dgamma.into_iter().map(cast).collect(), dbeta.into_iter().map(cast).collect());
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        );
        Ok((var, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    #[test]
    fn normalized_input_passes_through() {
        let tape = Tape::<f64>::new();
        // per-channel mean 0, biased variance 1
        let x = Tensor::from_f64([4, 2], &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]).unwrap();
        let xv = tape.constant(x.clone());
        let (y, stats) = xv
            .batch_norm(tape.constant(Tensor::ones([2])), tape.constant(Tensor::zeros([2])), None, true)
            .unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-4);
        let stats = stats.unwrap();
        assert_eq!(stats.mean.data(), &[0.0, 0.0]);
        assert_eq!(stats.var.data(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_channel_yields_beta() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([3, 2, 2, 1], 4.2));
        let beta = tape.constant(Tensor::full([1], 0.3));
        let (y, _) = x.batch_norm(tape.constant(Tensor::ones([1])), beta, None, true).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn eval_mode_requires_running_stats() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([2, 1]));
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(x.batch_norm(g, b, None, false).is_err());
        let (rm, rv) = (Tensor::full([1], 1.0), Tensor::full([1], 4.0));
        let (y, stats) = x.batch_norm(g, b, Some((&rm, &rv)), false).unwrap();
        assert!(stats.is_none());
        assert!(y.value().data().iter().all(|&v| v.abs() < 1e-6));
    }
}
