//! Finite-difference gradient checking.
//!
//! The analytic gradient is computed on a tape in the requested precision.
//! The numeric reference always uses central differences in 64-bit, so a
//! 32-bit check measures the 32-bit backward rules rather than 32-bit
//! rounding noise in the difference quotient.
//!
//! The scalar probed is `sum(op(inputs) * r)` for a fixed random `r`, which
//! exercises every output element (a plain sum would, for example, give a
//! zero gradient through softmax).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// A differentiable computation over a list of input tensors.
pub trait GradOp {
    fn name(&self) -> String;

    fn apply<'t, T: Real>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, relative to `max(1, |x|)`.
    pub step: f64,
    /// At most this many coordinates are probed per input.
    pub max_probes: usize,
    /// Relative errors use `max(|a|, |n|, floor)` as denominator with
    /// `floor = floor_ratio * max |gradient|` over the probed coordinates.
    pub floor_ratio: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-6,
            max_probes: 48,
            floor_ratio: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub precision: Precision,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Worst per-input norm-wise error `rms(a - n) / max(rms(a), rms(n), floor)`
    /// over the probed coordinates, with the floor relative to the largest
    /// per-input RMS gradient.
    pub norm_rel_error: f64,
    pub probes: usize,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    /// Every probed coordinate within `tolerance`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }

    /// Every input's probed gradient within `tolerance` in norm.
    pub fn passes_normwise(&self, tolerance: f64) -> bool {
        self.norm_rel_error.is_finite() && self.norm_rel_error < tolerance
    }
}

fn scalar_probe<T: Real, O: GradOp>(
    op: &O,
    inputs: &[Tensor<T>],
    projection: &Option<Tensor<f64>>,
) -> Result<(f64, Vec<usize>)> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op.apply(&tape, &vars)?.value();
    let shape = out.shape().to_vec();
    let value = match projection {
        Some(r) => out.data().iter().zip(r.data()).map(|(o, r)| o.as_f64() * r).sum(),
        None => 0.0,
    };
    Ok((value, shape))
}

/// Compare the analytic gradient of `op` with central differences.
pub fn grad_check<O: GradOp>(
    op: &O,
    inputs: &[Tensor<f64>],
    precision: Precision,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (_, out_shape) = scalar_probe(op, inputs, &None)?;
    let n_out: usize = out_shape.iter().product();
    let projection = Tensor::from_parts(out_shape, (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect());

    let analytic: Vec<Tensor<f64>> = match precision {
        Precision::F64 => analytic_grads::<f64, O>(op, inputs, &projection)?,
        Precision::F32 => analytic_grads::<f32, O>(op, inputs, &projection)?,
    };

    let proj = Some(projection);
    let mut pairs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= config.max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, config.max_probes).into_vec()
        };
        for j in picks {
            let x = input.data()[j];
            let h = config.step * x.abs().max(1.0);
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] = x + h;
            let (up, _) = scalar_probe::<f64, O>(op, &shifted, &proj)?;
            shifted[i].data_mut()[j] = x - h;
            let (down, _) = scalar_probe::<f64, O>(op, &shifted, &proj)?;
            let numeric = (up - down) / (2.0 * h);
            pairs.push((i, j, analytic[i].data()[j], numeric));
        }
    }

    let scale = pairs
        .iter()
        .map(|&(_, _, a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (config.floor_ratio * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        op: op.name(),
        precision,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        norm_rel_error: 0.0,
        probes: pairs.len(),
        worst: None,
    };
    // per input: (sum a^2, sum n^2, sum (a - n)^2, count)
    let mut sums = vec![(0.0, 0.0, 0.0, 0usize); inputs.len()];
    for &(i, _, a, n) in &pairs {
        let e = &mut sums[i];
        e.0 += a * a;
        e.1 += n * n;
        e.2 += (a - n) * (a - n);
        e.3 += 1;
    }
    let rms = |s: f64, k: usize| if k == 0 { 0.0 } else { (s / k as f64).sqrt() };
    let norm_floor = config.floor_ratio
        * sums.iter().map(|&(a, n, _, k)| rms(a, k).max(rms(n, k))).fold(0.0, f64::max);
    for &(a, n, d, k) in sums.iter().filter(|e| e.3 > 0) {
        let denom = rms(a, k).max(rms(n, k)).max(norm_floor).max(f64::MIN_POSITIVE);
        let rel = rms(d, k) / denom;
        if !(rel <= report.norm_rel_error) {
            report.norm_rel_error = rel;
        }
    }
    for (i, j, a, n) in pairs {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if !(rel <= report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}

fn analytic_grads<T: Real, O: GradOp>(
    op: &O,
    inputs: &[Tensor<f64>],
    projection: &Tensor<f64>,
) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.cast())).collect();
    let out = op.apply(&tape, &vars)?;
    let r = tape.constant(projection.cast());
    let loss = out.mul(r)?.sum();
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map(|g| g.cast())
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Identity;

    impl GradOp for Identity {
        fn name(&self) -> String {
            "identity".into()
        }

        fn apply<'t, T: Real>(&self, _tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
            Ok(inputs[0])
        }
    }

    #[test]
    fn identity_has_no_error() {
        let x = Tensor::from_f64([5], &[0.1, -2.0, 3.0, 0.0, 7.5]).unwrap();
        let r = grad_check(&Identity, &[x], Precision::F64, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.probes, 5);
    }
}
