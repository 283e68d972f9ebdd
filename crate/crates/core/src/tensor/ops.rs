use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, axis_split, mm, mm_nt, mm_tn};
use super::{broadcast_shapes, cast, numel, Real, Tensor, Var};
use crate::error::{Error, Result};

fn check_same_tape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.same_tape(b) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{op}: operands recorded on different tapes")))
    }
}

fn unary<'t, T: Real>(
    x: Var<'t, T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var<'t, T> {
    // df(input, output) -> local derivative
    let xv = x.value();
    let y = xv.map(f);
    let yv = Arc::new(y.clone());
    x.tape().push(
        y,
        &[x.id()],
        Box::new(move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
        }),
    )
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl<'t, T: Real> Var<'t, T> {
    /// Repeat along unit (or missing leading) axes; gradients are summed back.
    pub fn broadcast_to(self, target: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape == target {
            return Ok(self);
        }
        let out = kernels::broadcast_to(&self.value(), target)?;
        Ok(self.tape().push(
            out,
            &[self.id()],
            Box::new(move |g, _| vec![Some(kernels::reduce_sum_to(g, &shape).expect("validated in forward"))]),
        ))
    }

    fn binary(self, other: Var<'t, T>, kind: Binary, op: &'static str) -> Result<Var<'t, T>> {
        check_same_tape(op, &self, &other)?;
        let target = broadcast_shapes(&self.shape(), &other.shape()).ok_or_else(|| {
            Error::shape(op, format!("{:?} and {:?} do not broadcast", self.shape(), other.shape()))
        })?;
        let a = self.broadcast_to(&target)?;
        let b = other.broadcast_to(&target)?;
        let (av, bv) = (a.value(), b.value());
        let data: Vec<T> = match kind {
            Binary::Add => av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
            Binary::Sub => av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect(),
            Binary::Mul => av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        };
        let out = Tensor::from_parts(target, data);
        let backward: super::tape::BackwardFn<T> = match kind {
            Binary::Add => Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
            Binary::Sub => Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
            Binary::Mul => Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let d = g.data().iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                let gb = needs[1].then(|| {
                    let d = g.data().iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                    Tensor::from_parts(g.shape().to_vec(), d)
                });
                vec![ga, gb]
            }),
        };
        Ok(self.tape().push(out, &[a.id(), b.id()], backward))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let c: T = cast(factor);
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(
            self,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s: T = cast(slope);
        unary(
            self,
            move |v| if v > T::zero() { v } else { v * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        unary(
            self,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.tape().push(
            out,
            &[self.id()],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let out = kernels::mean_axis(&xv, axis)?;
        let shape = xv.shape().to_vec();
        Ok(self.tape().push(
            out,
            &[self.id()],
            Box::new(move |g, _| {
                let (outer, len, inner) = axis_split(&shape, axis);
                let scale: T = cast(1.0 / len as f64);
                let mut d = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let grow = &g.data()[o * inner..][..inner];
                    for j in 0..len {
                        for (dv, &gv) in d[(o * len + j) * inner..][..inner].iter_mut().zip(grow) {
                            *dv = gv * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let xv = self.value();
        let out = xv.reshape(shape.to_vec())?;
        let orig = xv.shape().to_vec();
        Ok(self.tape().push(
            out,
            &[self.id()],
            Box::new(move |g, _| vec![Some(g.reshape(orig.clone()).expect("same element count"))]),
        ))
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        check_same_tape("matmul", &self, &other)?;
        let (av, bv) = (self.value(), other.value());
        let out = kernels::matmul(&av, &bv)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        Ok(self.tape().push(
            out,
            &[self.id(), other.id()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| Tensor::from_parts(vec![m, k], mm_nt(g.data(), bv.data(), m, n, k)));
                let gb = needs[1].then(|| Tensor::from_parts(vec![k, n], mm_tn(av.data(), g.data(), m, k, n)));
                vec![ga, gb]
            }),
        ))
    }

    /// `[m, k] x [n, k]^T`, i.e. contraction over the trailing axis of both.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        check_same_tape("matmul_nt", &self, &other)?;
        let (av, bv) = (self.value(), other.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("cannot contract {:?} with {:?} over the last axis", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let out = Tensor::from_parts(vec![m, n], mm_nt(av.data(), bv.data(), m, k, n));
        Ok(self.tape().push(
            out,
            &[self.id(), other.id()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| Tensor::from_parts(vec![m, k], mm(g.data(), bv.data(), m, n, k)));
                let gb = needs[1].then(|| Tensor::from_parts(vec![n, k], mm_tn(g.data(), av.data(), m, n, k)));
                vec![ga, gb]
            }),
        ))
    }

    /// Fully connected layer: `x [B, in] x w [in, out] + b [out]`.
    pub fn dense(self, weights: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(weights)?.add(bias)
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let y = kernels::softmax(&xv, axis)?;
        let yv = Arc::new(y.clone());
        Ok(self.tape().push(
            y,
            &[self.id()],
            Box::new(move |g, _| {
                let (outer, len, inner) = axis_split(yv.shape(), axis);
                let (yd, gd) = (yv.data(), g.data());
                let mut d = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += gd[at(j)] * yd[at(j)];
                        }
                        for j in 0..len {
                            d[at(j)] = yd[at(j)] * (gd[at(j)] - s);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(yv.shape().to_vec(), d))]
            }),
        ))
    }

    /// Inverted dropout. With `train == false` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(self, rate: f64, train: bool, rng: &mut R) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - rate;
        let scale: T = cast(1.0 / keep);
        let xv = self.value();
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let out = xv.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.tape().push(
            out,
            &[self.id()],
            Box::new(move |g, _| {
                let d = g.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), d))]
            }),
        ))
    }

    /// Concatenate along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            check_same_tape("concat", first, p)?;
            let s = p.shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match leading extents {lead:?}", s),
                ));
            }
            widths.push(*s.last().unwrap());
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().push(
            Tensor::from_parts(shape, out),
            &ids,
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(needs) {
                    if need {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..][..w]);
                        }
                        let mut s = lead.clone();
                        s.push(w);
                        grads.push(Some(Tensor::from_parts(s, d)));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let width = *shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside last axis of {shape:?}", start + len),
            ));
        }
        let rows = xv.len() / width;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * width + start..][..len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        Ok(self.tape().push(
            Tensor::from_parts(out_shape, out),
            &[self.id()],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); rows * width];
                for r in 0..rows {
                    d[r * width + start..][..len].copy_from_slice(&g.data()[r * len..][..len]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), d))]
            }),
        ))
    }

    /// Mean absolute error against `target`, as a `[1]` tensor.
    pub fn mean_abs_error(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        check_same_tape("mean_abs_error", &self, &target)?;
        let (av, bv) = (self.value(), target.value());
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mean_abs_error",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = av.len();
        let inv: T = cast(1.0 / n as f64);
        let total: T = av.data().iter().zip(bv.data()).map(|(&a, &b)| (a - b).abs()).sum();
        Ok(self.tape().push(
            Tensor::scalar(total * inv),
            &[self.id(), target.id()],
            Box::new(move |g, needs| {
                let s = g.item() * inv;
                let sign: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&a, &b)| {
                        if a > b {
                            s
                        } else if a < b {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let shape = av.shape().to_vec();
                let gb = needs[1].then(|| Tensor::from_parts(shape.clone(), sign.iter().map(|&v| -v).collect()));
                let ga = needs[0].then(|| Tensor::from_parts(shape, sign));
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_relu_negative_slope() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
        assert_eq!(x.leaky_relu(0.2).value().data(), &[-0.2, 2.0]);
    }

    #[test]
    fn uniform_softmax_row_of_forty() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([3, 40], 0.7));
        let y = x.softmax(1).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.025).abs() < 1e-15));
    }

    #[test]
    fn mae_of_identical_is_zero() {
        let tape = Tape::<f32>::new();
        let t = Tensor::from_f64([4], &[1.0, -2.0, 3.5, 0.0]).unwrap();
        let a = tape.variable(t.clone());
        let b = tape.constant(t);
        assert_eq!(a.mean_abs_error(b).unwrap().value().item(), 0.0);
    }

    #[test]
    fn scalar_broadcast_gradient_counts_elements() {
        let tape = Tape::<f64>::new();
        let s = tape.variable(Tensor::scalar(3.0));
        let b = s.broadcast_to(&[4, 5, 6]).unwrap();
        assert!(b.value().data().iter().all(|&v| v == 3.0));
        let g = tape.backward(b.sum()).unwrap();
        assert_eq!(g.wrt(s).unwrap().item(), 120.0);
    }

    #[test]
    fn channel_vector_broadcast_repeats_per_position() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        let b = c.broadcast_to(&[2, 2, 3]).unwrap().value();
        for pos in b.data().chunks(3) {
            assert_eq!(pos, &[1.0, 2.0, 3.0]);
        }
        assert!(c.broadcast_to(&[2, 2, 4]).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_inverted() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1000]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = x.dropout(0.5, false, &mut rng).unwrap();
        assert_eq!(e.id(), x.id());
        let t = x.dropout(0.5, true, &mut rng).unwrap().value();
        assert!(t.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = t.mean();
        assert!((mean - 1.0).abs() < 0.15, "{mean}");
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::from_f64([2, 1], &[1.0, 2.0]).unwrap());
        let b = tape.variable(Tensor::from_f64([2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = Var::concat_last(&[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = c.narrow_last(1, 2).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        let g = tape.backward(back.sum()).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn non_conforming_shapes_rejected() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        assert!(a.add(b).is_err());
        assert!(a.matmul(b).is_err());
        assert!(a.mean_abs_error(b).is_err());
    }
}
