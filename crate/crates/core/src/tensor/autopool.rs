use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

impl<'t, T: Real> Var<'t, T> {
    /// Auto-pooling over the time axis of `[.., N, P]`.
    ///
    /// For each column `p`, the weights are `softmax_n(alpha[p] * x[n, p])` and
    /// the output is the weighted mean of the column. `alpha = 0` gives mean
    /// pooling and large `alpha` approaches max pooling.
    pub fn autopool(self, alpha: Var<'t, T>) -> Result<Var<'t, T>> {
        let (xv, av) = (self.value(), alpha.value());
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("autopool", format!("input {shape:?} must be [.., N, P]")));
        }
        let p = shape[shape.len() - 1];
        let n = shape[shape.len() - 2];
        if n == 0 {
            return Err(Error::shape("autopool", "empty time axis"));
        }
        if av.shape() != [p] {
            return Err(Error::shape(
                "autopool",
                format!("alpha {:?} must be [{p}] for input {shape:?}", av.shape()),
            ));
        }
        let batch = xv.len() / (n * p);
        let (x, a) = (xv.data(), av.data());
        let mut weights = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); batch * p];
        for b in 0..batch {
            for j in 0..p {
                let at = |t: usize| (b * n + t) * p + j;
                let mut max = T::neg_infinity();
                for t in 0..n {
                    max = max.max(a[j] * x[at(t)]);
                }
                let mut total = T::zero();
                for t in 0..n {
                    let e = (a[j] * x[at(t)] - max).exp();
                    weights[at(t)] = e;
                    total += e;
                }
                let mut acc = T::zero();
                for t in 0..n {
                    weights[at(t)] /= total;
                    acc += weights[at(t)] * x[at(t)];
                }
                out[b * p + j] = acc;
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(p);
        let pooled = out.clone();
        Ok(self.tape().push(
            Tensor::from_parts(out_shape, out),
            &[self.id(), alpha.id()],
            Box::new(move |g, needs| {
                let (x, a) = (xv.data(), av.data());
                let gd = g.data();
                let mut dx = vec![T::zero(); x.len()];
                let mut da = vec![T::zero(); p];
                for b in 0..batch {
                    for j in 0..p {
                        let at = |t: usize| (b * n + t) * p + j;
                        let y = pooled[b * p + j];
                        let gy = gd[b * p + j];
                        let mut second = T::zero();
                        for t in 0..n {
                            let (w, xt) = (weights[at(t)], x[at(t)]);
                            // d y / d x_t = w_t (1 + alpha (x_t - y))
                            dx[at(t)] = gy * w * (T::one() + a[j] * (xt - y));
                            second += w * xt * xt;
                        }
                        // d y / d alpha = weighted variance of the column
                        da[j] += gy * (second - y * y);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                    needs[1].then(|| Tensor::from_parts(vec![p], da)),
                ]
            }),
        ))
    }
}
