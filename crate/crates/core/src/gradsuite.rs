//! Finite-difference checks for every differentiable operation and for the
//! full conditioned U-Net.
//!
//! Each case draws its inputs from a seed, so a failing `(case, seed)` pair
//! can be replayed exactly.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{film_strong, film_weak, basis_shape, BasisVariant, ModelVariant};
use crate::error::Result;
use crate::phoneme::P;
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradOp, Precision};
use crate::tensor::params::BoundParams;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::unet::{ForwardCtx, SeparationModel, UNetConfig};

/// Elementary tensor operations with the shapes they are checked at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorOp {
    Add,
    Sub,
    Mul,
    BroadcastAdd,
    Scale,
    Relu,
    LeakyRelu,
    Sigmoid,
    Sum,
    Mean,
    MeanAxis,
    Reshape,
    Matmul,
    MatmulNt,
    Dense,
    Softmax,
    Dropout,
    ConcatLast,
    NarrowLast,
    MeanAbsError,
    Conv2d,
    Conv2dTranspose,
    BatchNormTrain,
    BatchNormEval,
    Autopool,
    FilmWeakScalar,
    FilmWeakChannel,
    FilmStrong(BasisVariant),
}

impl TensorOp {
    pub const ALL: [TensorOp; 31] = [
        TensorOp::Add,
        TensorOp::Sub,
        TensorOp::Mul,
        TensorOp::BroadcastAdd,
        TensorOp::Scale,
        TensorOp::Relu,
        TensorOp::LeakyRelu,
        TensorOp::Sigmoid,
        TensorOp::Sum,
        TensorOp::Mean,
        TensorOp::MeanAxis,
        TensorOp::Reshape,
        TensorOp::Matmul,
        TensorOp::MatmulNt,
        TensorOp::Dense,
        TensorOp::Softmax,
        TensorOp::Dropout,
        TensorOp::ConcatLast,
        TensorOp::NarrowLast,
        TensorOp::MeanAbsError,
        TensorOp::Conv2d,
        TensorOp::Conv2dTranspose,
        TensorOp::BatchNormTrain,
        TensorOp::BatchNormEval,
        TensorOp::Autopool,
        TensorOp::FilmWeakScalar,
        TensorOp::FilmWeakChannel,
        TensorOp::FilmStrong(BasisVariant::All),
        TensorOp::FilmStrong(BasisVariant::Channel),
        TensorOp::FilmStrong(BasisVariant::Frequency),
        TensorOp::FilmStrong(BasisVariant::Scalar),
    ];

    fn input_shapes(self) -> Vec<Vec<usize>> {
        use TensorOp::*;
        let (b, w, h, c) = (2, 4, 3, 5);
        match self {
            Add | Sub | Mul | MeanAbsError => vec![vec![3, 4], vec![3, 4]],
            BroadcastAdd => vec![vec![2, 3, 4], vec![4]],
            Scale | Relu | LeakyRelu | Sigmoid | Sum | Mean | Reshape | Dropout => vec![vec![3, 4, 2]],
            MeanAxis | Softmax => vec![vec![2, 5, 3]],
            Matmul => vec![vec![3, 4], vec![4, 5]],
            MatmulNt => vec![vec![3, 4], vec![5, 4]],
            Dense => vec![vec![3, 4], vec![4, 5], vec![5]],
            ConcatLast => vec![vec![2, 3, 2], vec![2, 3, 4]],
            NarrowLast => vec![vec![2, 3, 6]],
            Conv2d => vec![vec![2, 6, 8, 3], vec![5, 5, 3, 4]],
            Conv2dTranspose => vec![vec![2, 3, 4, 4], vec![5, 5, 3, 4]],
            BatchNormTrain | BatchNormEval => vec![vec![3, 4, 2, 3], vec![3], vec![3]],
            Autopool => vec![vec![2, 6, 4], vec![4]],
            FilmWeakScalar => vec![vec![b, w, h, c], vec![b, 1], vec![b, 1]],
            FilmWeakChannel => vec![vec![b, w, h, c], vec![b, c], vec![b, c]],
            FilmStrong(v) => vec![vec![b, w, h, c], vec![b, w, P], basis_shape(v, h, c), basis_shape(v, h, c)],
        }
    }

    /// Random inputs for this op. Values are kept away from kinks where the
    /// op has one, so central differences do not straddle them.
    pub fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shapes = self.input_shapes().into_iter();
        let mut next = |rng: &mut ChaCha8Rng| {
            let shape = shapes.next().expect("shape per input");
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let mag = rng.random_range(0.05..1.5);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            Tensor::from_parts(shape, data)
        };
        let count = self.input_shapes().len();
        let mut inputs: Vec<Tensor<f64>> = (0..count).map(|_| next(&mut rng)).collect();
        match self {
            TensorOp::MeanAbsError => {
                // keep |a - b| away from zero
                let a = inputs[0].clone();
                for (t, &x) in inputs[1].data_mut().iter_mut().zip(a.data()) {
                    *t = x + t.signum() * (0.1 + t.abs());
                }
            }
            TensorOp::FilmStrong(_) => {
                // a row-stochastic phoneme matrix, as at any U-Net depth
                let z = &mut inputs[1];
                for row in z.data_mut().chunks_mut(P) {
                    let total: f64 = row.iter().map(|v| v.abs()).sum();
                    row.iter_mut().for_each(|v| *v = v.abs() / total);
                }
            }
            _ => {}
        }
        inputs
    }
}

impl fmt::Display for TensorOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorOp::FilmStrong(v) => write!(f, "film_strong_{}", format!("{v:?}").to_lowercase()),
            other => {
                let name = format!("{other:?}");
                let mut snake = String::new();
                for (i, ch) in name.chars().enumerate() {
                    if ch.is_uppercase() && i > 0 {
                        snake.push('_');
                    }
                    snake.push(ch.to_ascii_lowercase());
                }
                f.write_str(&snake)
            }
        }
    }
}

impl GradOp for TensorOp {
    fn name(&self) -> String {
        self.to_string()
    }

    fn apply<'t, T: Real>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        use TensorOp::*;
        match *self {
            Add => x[0].add(x[1]),
            Sub => x[0].sub(x[1]),
            Mul => x[0].mul(x[1]),
            BroadcastAdd => x[0].add(x[1]),
            Scale => Ok(x[0].scale(-1.7)),
            Relu => Ok(x[0].relu()),
            LeakyRelu => Ok(x[0].leaky_relu(0.2)),
            Sigmoid => Ok(x[0].sigmoid()),
            Sum => Ok(x[0].sum()),
            Mean => Ok(x[0].mean()),
            MeanAxis => x[0].mean_axis(1),
            Reshape => x[0].reshape(&[4, 6]),
            Matmul => x[0].matmul(x[1]),
            MatmulNt => x[0].matmul_nt(x[1]),
            Dense => x[0].dense(x[1], x[2]),
            Softmax => x[0].softmax(1),
            Dropout => {
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                x[0].dropout(0.5, true, &mut rng)
            }
            ConcatLast => Var::concat_last(&[x[0], x[1]]),
            NarrowLast => x[0].narrow_last(2, 3),
            MeanAbsError => x[0].mean_abs_error(x[1]),
            Conv2d => x[0].conv2d(x[1], 2),
            Conv2dTranspose => x[0].conv2d_transpose(x[1], 2, 6, 8),
            BatchNormTrain => Ok(x[0].batch_norm(x[1], x[2], None, true)?.0),
            BatchNormEval => {
                // running statistics are buffers, not differentiable inputs
                let mean = Tensor::from_parts(vec![3], vec![0.2, -0.1, 0.4]).cast::<T>();
                let var = Tensor::from_parts(vec![3], vec![0.5, 1.3, 2.0]).cast::<T>();
                Ok(x[0].batch_norm(x[1], x[2], Some((&mean, &var)), false)?.0)
            }
            Autopool => x[0].autopool(x[1]),
            FilmWeakScalar | FilmWeakChannel => film_weak(x[0], x[1], x[2]),
            FilmStrong(v) => {
                let _ = tape;
                film_strong(x[0], x[1], x[2], x[3], v)
            }
        }
    }
}

/// The whole U-Net in training mode (batch norm on batch statistics,
/// dropout with a fixed mask). Inputs are the magnitudes, the phoneme
/// matrix and then every trainable parameter.
pub struct UNetOp {
    pub model: SeparationModel<f64>,
    names: Vec<String>,
    batch: usize,
}

impl UNetOp {
    pub fn new(variant: ModelVariant, config: UNetConfig, seed: u64) -> Result<Self> {
        let model = SeparationModel::new(config, variant.conditioning(), seed)?;
        let mut names: Vec<String> = model.params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
        names.sort();
        Ok(UNetOp { model, names, batch: 8 })
    }

    /// The desk-scale geometry used for gradient checks.
    pub fn tiny_config() -> UNetConfig {
        UNetConfig {
            frames: 16,
            ..UNetConfig::tiny()
        }
    }

    pub fn inputs(&self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.model.config;
        let n = self.batch * cfg.frames;
        let x = (0..n * cfg.bins).map(|_| rng.random_range(0.0..1.0)).collect();
        let z = (0..n * P).map(|_| if rng.random::<f64>() < 0.1 { 1.0 } else { 0.0 }).collect();
        let mut out = vec![
            Tensor::from_parts(vec![self.batch, cfg.frames, cfg.bins], x),
            Tensor::from_parts(vec![self.batch, cfg.frames, P], z),
        ];
        for name in &self.names {
            let mut t = self.model.params.tensor(name).expect("listed parameter").clone();
            // move zero-initialized biases and heads off their symmetric start
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            out.push(t);
        }
        out
    }
}

impl GradOp for UNetOp {
    fn name(&self) -> String {
        format!("unet_{}", self.model.variant())
    }

    fn apply<'t, T: Real>(&self, _tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let model = SeparationModel {
            config: self.model.config,
            conditioning: self.model.conditioning,
            params: self.model.params.cast::<T>(),
            vocabulary: String::new(),
        };
        let vars: HashMap<String, Var<'t, T>> = self.names.iter().cloned().zip(x[2..].iter().copied()).collect();
        let bound = BoundParams::from_vars(vars);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ctx = ForwardCtx::new(&model.params, &bound, true, &mut rng);
        model.forward(&mut ctx, x[0], Some(x[1]))
    }
}

/// Variants whose full forward pass is checked: the richest strong and weak
/// configurations between them touch every conditioning path.
pub const UNET_VARIANTS: [ModelVariant; 2] = [
    ModelVariant::Strong(BasisVariant::All, crate::conditioning::Insertion::Complete),
    ModelVariant::WeakComplex,
];

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub case: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    /// Elementary ops must match coordinate by coordinate. Whole-network
    /// gradients in 32-bit are judged norm-wise per parameter tensor: they
    /// sum thousands of terms of both signs, and coordinates far below the
    /// tensor's scale keep an absolute rounding error near 1e-5 of it.
    pub fn passes(&self, tolerance: f64) -> bool {
        if self.is_network() && self.report.precision == Precision::F32 {
            self.report.passes_normwise(tolerance)
        } else {
            self.report.passes(tolerance)
        }
    }

    pub fn is_network(&self) -> bool {
        self.case.starts_with("unet_")
    }
}

/// Central-difference step for whole-network checks. Batch norm magnifies
/// small shifts, so larger steps straddle ReLU kinks downstream and measure
/// the kink rather than the gradient; the numeric side is always 64-bit, so
/// the small step costs no accuracy.
pub const UNET_STEP: f64 = 1e-7;

/// Check every tensor op and the U-Net variants under each seed.
///
/// Network cases are additionally checked coordinate-wise in 64-bit
/// whatever `precision` is, which isolates the backward rules from 32-bit
/// rounding.
pub fn run_suite(seeds: &[u64], precision: Precision, unet_probes: usize) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let config = GradCheckConfig {
            seed,
            ..GradCheckConfig::default()
        };
        for op in TensorOp::ALL {
            let report = grad_check(&op, &op.inputs(seed), precision, &config)?;
            out.push(SuiteResult {
                case: op.to_string(),
                seed,
                report,
            });
        }
        for variant in UNET_VARIANTS {
            let op = UNetOp::new(variant, UNetOp::tiny_config(), seed)?;
            let inputs = op.inputs(seed);
            let net_config = GradCheckConfig {
                max_probes: unet_probes,
                step: UNET_STEP,
                ..config.clone()
            };
            let mut precisions = vec![precision];
            if precision == Precision::F32 {
                precisions.push(Precision::F64);
            }
            for p in precisions {
                out.push(SuiteResult {
                    case: op.name(),
                    seed,
                    report: grad_check(&op, &inputs, p, &net_config)?,
                });
            }
        }
    }
    Ok(out)
}
