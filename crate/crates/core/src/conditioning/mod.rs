//! Feature-wise linear modulation.
//!
//! Weak conditioning computes one affine transform per patch from the whole
//! phoneme matrix through a small control network. Strong conditioning keeps
//! the time axis: learned per-phoneme basis tensors are mixed frame by frame
//! with the normalized, time-pooled phoneme matrix.

mod weak;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use weak::WeakControlConfig;

use crate::error::{Error, Result};
use crate::phoneme::P;
use crate::tensor::params::truncated_normal;
use crate::tensor::{ParamGroup, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakVariant {
    Simple,
    Complex,
}

/// Which axes of a feature map a strong basis spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisVariant {
    All,
    Channel,
    Frequency,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    Complete,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    None,
    WeakSimple,
    WeakComplex,
    Strong,
}

/// Full conditioning choice of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub kind: ConditioningKind,
    pub strong_variant: BasisVariant,
    pub insertion: Insertion,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            kind: ConditioningKind::None,
            strong_variant: BasisVariant::Scalar,
            insertion: Insertion::Complete,
        }
    }
}

impl ConditioningConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn weak(variant: WeakVariant) -> Self {
        ConditioningConfig {
            kind: match variant {
                WeakVariant::Simple => ConditioningKind::WeakSimple,
                WeakVariant::Complex => ConditioningKind::WeakComplex,
            },
            ..Self::default()
        }
    }

    pub fn strong(variant: BasisVariant, insertion: Insertion) -> Self {
        ConditioningConfig {
            kind: ConditioningKind::Strong,
            strong_variant: variant,
            insertion,
        }
    }

    pub fn is_conditioned(&self) -> bool {
        self.kind != ConditioningKind::None
    }

    pub fn weak_variant(&self) -> Option<WeakVariant> {
        match self.kind {
            ConditioningKind::WeakSimple => Some(WeakVariant::Simple),
            ConditioningKind::WeakComplex => Some(WeakVariant::Complex),
            _ => None,
        }
    }

    /// Encoder depths (1-based) that receive FiLM for a network of `depth` blocks.
    pub fn conditioned_depths(&self, depth: usize) -> Vec<usize> {
        match (self.kind, self.insertion) {
            (ConditioningKind::None, _) => vec![],
            (ConditioningKind::Strong, Insertion::Bottleneck) => vec![depth],
            _ => (1..=depth).collect(),
        }
    }
}

/// The eleven named model configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    Unet,
    WeakSimple,
    WeakComplex,
    Strong(BasisVariant, Insertion),
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 11] = [
        ModelVariant::Unet,
        ModelVariant::WeakSimple,
        ModelVariant::WeakComplex,
        ModelVariant::Strong(BasisVariant::All, Insertion::Complete),
        ModelVariant::Strong(BasisVariant::All, Insertion::Bottleneck),
        ModelVariant::Strong(BasisVariant::Channel, Insertion::Complete),
        ModelVariant::Strong(BasisVariant::Channel, Insertion::Bottleneck),
        ModelVariant::Strong(BasisVariant::Frequency, Insertion::Complete),
        ModelVariant::Strong(BasisVariant::Frequency, Insertion::Bottleneck),
        ModelVariant::Strong(BasisVariant::Scalar, Insertion::Complete),
        ModelVariant::Strong(BasisVariant::Scalar, Insertion::Bottleneck),
    ];

    pub fn conditioning(self) -> ConditioningConfig {
        match self {
            ModelVariant::Unet => ConditioningConfig::none(),
            ModelVariant::WeakSimple => ConditioningConfig::weak(WeakVariant::Simple),
            ModelVariant::WeakComplex => ConditioningConfig::weak(WeakVariant::Complex),
            ModelVariant::Strong(v, i) => ConditioningConfig::strong(v, i),
        }
    }

    pub fn from_conditioning(c: &ConditioningConfig) -> Self {
        match c.kind {
            ConditioningKind::None => ModelVariant::Unet,
            ConditioningKind::WeakSimple => ModelVariant::WeakSimple,
            ConditioningKind::WeakComplex => ModelVariant::WeakComplex,
            ConditioningKind::Strong => ModelVariant::Strong(c.strong_variant, c.insertion),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelVariant::Unet => "unet".to_string(),
            ModelVariant::WeakSimple => "W_si".to_string(),
            ModelVariant::WeakComplex => "W_co".to_string(),
            ModelVariant::Strong(v, i) => {
                let letter = match v {
                    BasisVariant::All => 'a',
                    BasisVariant::Channel => 'c',
                    BasisVariant::Frequency => 'f',
                    BasisVariant::Scalar => 's',
                };
                let star = if *i == Insertion::Bottleneck { "*" } else { "" };
                format!("S_{letter}{star}")
            }
        };
        f.write_str(&s)
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

/// Basis tensor shape (phoneme axis last) at a block with `h` frequency rows
/// and `c` channels.
pub fn basis_shape(variant: BasisVariant, h: usize, c: usize) -> Vec<usize> {
    match variant {
        BasisVariant::All => vec![h, c, P],
        BasisVariant::Channel => vec![c, P],
        BasisVariant::Frequency => vec![h, P],
        BasisVariant::Scalar => vec![P],
    }
}

/// Register `basis.d{d}.gamma/.beta` for each conditioned depth;
/// `dims[d - 1] = (h_d, c_d)`.
pub fn init_basis<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    variant: BasisVariant,
    depths: &[usize],
    dims: &[(usize, usize)],
    rng: &mut R,
) {
    for &d in depths {
        let (h, c) = dims[d - 1];
        let shape = basis_shape(variant, h, c);
        store.insert(format!("basis.d{d}.gamma"), truncated_normal(&shape, 1.0, 0.02, rng), true, ParamGroup::Basis);
        store.insert(format!("basis.d{d}.beta"), truncated_normal(&shape, 0.0, 0.02, rng), true, ParamGroup::Basis);
    }
}

fn rank4(op: &'static str, x: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [b, w, h, c] => Ok((b, w, h, c)),
        _ => Err(Error::shape(op, format!("feature map {x:?} must be [B, W, H, C]"))),
    }
}

/// Bring a weak modulation into a broadcastable `[B|1, 1, 1, 1|C]` shape.
fn weak_shape<'t, T: Real>(m: Var<'t, T>, b: usize, c: usize) -> Result<Var<'t, T>> {
    let s = m.shape();
    let n: usize = s.iter().product();
    let target = if n == 1 {
        vec![1, 1, 1, 1]
    } else if s.len() == 1 && s[0] == c {
        vec![1, 1, 1, c]
    } else if s.len() == 4 && s[0] == b && s[1] == 1 && s[2] == 1 && (s[3] == 1 || s[3] == c) {
        s.clone()
    } else if s.len() == 2 && s[0] == b && (s[1] == 1 || s[1] == c) {
        vec![b, 1, 1, s[1]]
    } else {
        return Err(Error::shape(
            "film_weak",
            format!("modulation {s:?} is neither scalar nor per-channel for {b} x {c}"),
        ));
    };
    m.reshape(&target)
}

/// `gamma * x + beta` with scalar or per-channel (optionally per-batch)
/// modulation, identical at every time-frequency position.
pub fn film_weak<'t, T: Real>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
    let (b, _, _, c) = rank4("film_weak", &x.shape())?;
    let g = weak_shape(gamma, b, c)?;
    let be = weak_shape(beta, b, c)?;
    x.mul(g)?.add(be)
}

/// Strong FiLM: for every frame `w`, the modulation is `sum_p z[w, p] * basis[.., p]`.
///
/// `x` is `[B, W, H, C]`, `z` is `[B, W, P]` (row-stochastic at this depth)
/// and both bases have the shape given by [`basis_shape`].
pub fn film_strong<'t, T: Real>(
    x: Var<'t, T>,
    z: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    variant: BasisVariant,
) -> Result<Var<'t, T>> {
    let (b, w, h, c) = rank4("film_strong", &x.shape())?;
    let zs = z.shape();
    if zs != [b, w, P] {
        return Err(Error::shape(
            "film_strong",
            format!("phoneme matrix {zs:?} does not match feature map time axis [{b}, {w}, {P}]"),
        ));
    }
    let expected = basis_shape(variant, h, c);
    for basis in [gamma, beta] {
        if basis.shape() != expected {
            return Err(Error::shape(
                "film_strong",
                format!("{variant:?} basis {:?} should be {expected:?}", basis.shape()),
            ));
        }
    }
    let k: usize = expected[..expected.len() - 1].iter().product();
    let mod_shape = match variant {
        BasisVariant::All => [b, w, h, c],
        BasisVariant::Channel => [b, w, 1, c],
        BasisVariant::Frequency => [b, w, h, 1],
        BasisVariant::Scalar => [b, w, 1, 1],
    };
    let zf = z.reshape(&[b * w, P])?;
    let modulation = |basis: Var<'t, T>| -> Result<Var<'t, T>> {
        zf.matmul_nt(basis.reshape(&[k, P])?)?.reshape(&mod_shape)
    };
    x.mul(modulation(gamma)?)?.add(modulation(beta)?)
}

/// Exact per-frame evaluation of [`film_strong`] with explicit loops, used as
/// a reference implementation.
pub fn film_strong_reference(
    x: &Tensor<f64>,
    z: &Tensor<f64>,
    gamma: &Tensor<f64>,
    beta: &Tensor<f64>,
    variant: BasisVariant,
) -> Tensor<f64> {
    let [b, w, h, c] = <[usize; 4]>::try_from(x.shape()).expect("rank 4");
    let mut out = x.clone();
    let basis_at = |t: &Tensor<f64>, hi: usize, ci: usize, p: usize| match variant {
        BasisVariant::All => t.data()[(hi * c + ci) * P + p],
        BasisVariant::Channel => t.data()[ci * P + p],
        BasisVariant::Frequency => t.data()[hi * P + p],
        BasisVariant::Scalar => t.data()[p],
    };
    for bi in 0..b {
        for wi in 0..w {
            for hi in 0..h {
                for ci in 0..c {
                    let (mut g, mut be) = (0.0, 0.0);
                    for p in 0..P {
                        let zv = z.data()[(bi * w + wi) * P + p];
                        g += zv * basis_at(gamma, hi, ci, p);
                        be += zv * basis_at(beta, hi, ci, p);
                    }
                    let idx = ((bi * w + wi) * h + hi) * c + ci;
                    out.data_mut()[idx] = g * x.data()[idx] + be;
                }
            }
        }
    }
    out
}

/// Parameter count of `variant` at full scale: the base total for `unet`, the
/// trainable increment over it otherwise. Counts come from an instantiated
/// model.
pub fn param_count(variant: ModelVariant) -> Result<usize> {
    use crate::unet::{SeparationModel, UNetConfig};
    let base = SeparationModel::<f32>::new(UNetConfig::full(), ConditioningConfig::none(), 0)?.count_parameters();
    if variant == ModelVariant::Unet {
        return Ok(base.total);
    }
    let model = SeparationModel::<f32>::new(UNetConfig::full(), variant.conditioning(), 0)?;
    Ok(model.count_parameters().total - base.total)
}
