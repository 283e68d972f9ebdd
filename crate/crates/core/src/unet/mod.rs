//! The conditioned U-Net and the separation pipeline built on it.

mod layers;

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{apply_bn_updates, ForwardCtx, BN_MOMENTUM};

use crate::conditioning::{film_strong, film_weak, init_basis, ConditioningConfig, ConditioningKind, ModelVariant, WeakControlConfig};
use crate::dsp::{self, apply_mask, assemble_patches, extract_patches, istft, stft, AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::phoneme::{build_activation_matrix, vocab, ActivationMatrix, AnnotationSequence, Lexicon, P};
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::params::fan_in_init;
use crate::tensor::{OptimizerState, ParamGroup, ParamStore, Real, Tape, Tensor, Var};

/// Backbone geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Leading decoder blocks that apply dropout.
    pub dropout_blocks: usize,
    /// Frames per patch.
    pub frames: usize,
    /// Frequency bins per patch.
    pub bins: usize,
    pub stft: StftConfig,
}

impl UNetConfig {
    /// Six blocks, 16..512 channels, 128 x 512 patches.
    pub fn full() -> Self {
        UNetConfig {
            depth: 6,
            base_channels: 16,
            kernel: 5,
            stride: 2,
            leaky_slope: 0.2,
            dropout: 0.5,
            dropout_blocks: 3,
            frames: 128,
            bins: 512,
            stft: StftConfig::default(),
        }
    }

    /// Desk-scale preset: three blocks of 4, 8, 16 channels on 64 x 64
    /// patches from the compact STFT.
    pub fn tiny() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 4,
            frames: 64,
            bins: 64,
            stft: StftConfig::compact(),
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::InvalidArgument(format!("unknown model preset {name:?} (full | tiny)"))),
        }
    }

    /// Channels of encoder block `d` (1-based).
    pub fn channels(&self, d: usize) -> usize {
        self.base_channels << (d - 1)
    }

    /// `(W_d, H_d)` for `d = 0..=depth`; level 0 is the input.
    pub fn extents(&self) -> Vec<(usize, usize)> {
        (0..=self.depth).map(|d| (self.frames >> d, self.bins >> d)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 1usize << self.depth;
        if self.depth == 0 || self.base_channels == 0 || self.stride != 2 {
            return Err(Error::InvalidArgument(format!("unsupported backbone {self:?}")));
        }
        if self.frames % unit != 0 || self.bins % unit != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {}x{} not divisible by 2^{}",
                self.frames, self.bins, self.depth
            )));
        }
        if self.bins != self.stft.bins() {
            return Err(Error::InvalidArgument(format!(
                "patch has {} bins but the STFT yields {}",
                self.bins,
                self.stft.bins()
            )));
        }
        self.stft.validate()
    }
}

/// Trainable parameter totals by component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub control: usize,
    pub basis: usize,
    /// Trainable total (`backbone + control + basis`).
    pub total: usize,
    /// Non-trainable buffers (batch-norm running statistics).
    pub buffers: usize,
}

/// A U-Net with its conditioning and parameters.
#[derive(Clone, Debug)]
pub struct SeparationModel<T = f32> {
    pub config: UNetConfig,
    pub conditioning: ConditioningConfig,
    pub params: ParamStore<T>,
    pub vocabulary: String,
}

/// Metadata stored inside a model checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHeader {
    pub variant: String,
    pub config: UNetConfig,
    pub conditioning: ConditioningConfig,
    pub vocabulary: String,
}

impl<T: Real> SeparationModel<T> {
    /// Fresh model. The backbone and the conditioning parameters draw from
    /// independent streams of `seed`, so variants sharing a seed share their
    /// initial backbone.
    pub fn new(config: UNetConfig, conditioning: ConditioningConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let g = ParamGroup::Backbone;
        let bn = |params: &mut ParamStore<T>, prefix: &str, c: usize| {
            params.insert(format!("{prefix}.gamma"), Tensor::ones(vec![c]), true, g);
            params.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]), true, g);
            params.insert(format!("{prefix}.mean"), Tensor::zeros(vec![c]), false, g);
            params.insert(format!("{prefix}.var"), Tensor::ones(vec![c]), false, g);
        };
        let mut cin = 1;
        for d in 1..=config.depth {
            let c = config.channels(d);
            params.insert(format!("enc{d}.kernel"), fan_in_init(&[k, k, cin, c], k * k * cin, &mut rng), true, g);
            params.insert(format!("enc{d}.bias"), Tensor::zeros(vec![c]), true, g);
            bn(&mut params, &format!("enc{d}.bn"), c);
            cin = c;
        }
        for j in 1..=config.depth {
            let level = config.depth - j;
            let cout = if level == 0 { 1 } else { config.channels(level) };
            params.insert(format!("dec{j}.kernel"), fan_in_init(&[k, k, cout, cin], k * k * cin, &mut rng), true, g);
            params.insert(format!("dec{j}.bias"), Tensor::zeros(vec![cout]), true, g);
            if level > 0 {
                bn(&mut params, &format!("dec{j}.bn"), cout);
                cin = 2 * cout;
            }
        }
        let mut crng = ChaCha8Rng::seed_from_u64(seed);
        crng.set_stream(1);
        if let Some(v) = conditioning.weak_variant() {
            WeakControlConfig::new(v, &Self::channel_plan(&config)).init(&mut params, &mut crng);
        }
        if conditioning.kind == ConditioningKind::Strong {
            let dims: Vec<(usize, usize)> = (1..=config.depth).map(|d| (config.bins >> d, config.channels(d))).collect();
            init_basis(
                &mut params,
                conditioning.strong_variant,
                &conditioning.conditioned_depths(config.depth),
                &dims,
                &mut crng,
            );
        }
        Ok(SeparationModel {
            config,
            conditioning,
            params,
            vocabulary: vocab::fingerprint(),
        })
    }

    fn channel_plan(config: &UNetConfig) -> Vec<usize> {
        (1..=config.depth).map(|d| config.channels(d)).collect()
    }

    pub fn variant(&self) -> ModelVariant {
        ModelVariant::from_conditioning(&self.conditioning)
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        let backbone = self.params.count_by_group(ParamGroup::Backbone, true);
        let control = self.params.count_by_group(ParamGroup::Control, true);
        let basis = self.params.count_by_group(ParamGroup::Basis, true);
        ParamBreakdown {
            backbone,
            control,
            basis,
            total: self.params.trainable_count(),
            buffers: self.params.buffer_count(),
        }
    }

    /// Mask `[B, N, M]` for magnitudes `x [B, N, M]` and, for conditioned
    /// models, raw binary phoneme windows `z [B, N, P]`.
    pub fn forward<'t>(
        &self,
        ctx: &mut ForwardCtx<'_, 't, T>,
        x: Var<'t, T>,
        z: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let xs = x.shape();
        if xs.len() != 3 || xs[1] != cfg.frames || xs[2] != cfg.bins {
            return Err(Error::shape(
                "unet input",
                format!("{xs:?}, expected [B, {}, {}]", cfg.frames, cfg.bins),
            ));
        }
        let b = xs[0];
        let z = match (self.conditioning.is_conditioned(), z) {
            (false, _) => None,
            (true, None) => return Err(Error::InvalidArgument("conditioned model needs a phoneme matrix".into())),
            (true, Some(z)) => {
                if z.shape() != [b, cfg.frames, P] {
                    return Err(Error::shape("unet phoneme input", format!("{:?}, expected [{b}, {}, {P}]", z.shape(), cfg.frames)));
                }
                Some(z)
            }
        };
        let film_depths = self.conditioning.conditioned_depths(cfg.depth);
        let weak = match (self.conditioning.weak_variant(), z) {
            (Some(v), Some(z)) => Some((v, WeakControlConfig::new(v, &Self::channel_plan(cfg)).forward(ctx, z)?)),
            _ => None,
        };
        let strong_z = match (self.conditioning.kind, z) {
            (ConditioningKind::Strong, Some(z)) => Some(z.softmax(2)?),
            _ => None,
        };

        let extents = cfg.extents();
        let mut h = x.reshape(&[b, cfg.frames, cfg.bins, 1])?;
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut weak_offset = 0;
        for d in 1..=cfg.depth {
            let c = cfg.channels(d);
            let block = |e: Error| Error::shape("encoder block", format!("{d}: {e}"));
            h = h.conv2d(ctx.p(&format!("enc{d}.kernel"))?, cfg.stride).map_err(block)?;
            h = h.add(ctx.p(&format!("enc{d}.bias"))?)?;
            h = ctx.batch_norm(&format!("enc{d}.bn"), h)?;
            if film_depths.contains(&d) {
                if let Some((variant, (gamma, beta))) = &weak {
                    let width = match variant {
                        crate::conditioning::WeakVariant::Simple => 1,
                        crate::conditioning::WeakVariant::Complex => c,
                    };
                    let g = gamma.narrow_last(weak_offset, width)?;
                    let be = beta.narrow_last(weak_offset, width)?;
                    weak_offset += width;
                    h = film_weak(h, g, be)?;
                }
                if let Some(zn) = strong_z {
                    let (w_d, _) = extents[d];
                    let zd = zn.reshape(&[b * w_d, 1 << d, P])?.mean_axis(1)?.reshape(&[b, w_d, P])?;
                    h = film_strong(
                        h,
                        zd,
                        ctx.p(&format!("basis.d{d}.gamma"))?,
                        ctx.p(&format!("basis.d{d}.beta"))?,
                        self.conditioning.strong_variant,
                    )?;
                }
            }
            h = h.leaky_relu(cfg.leaky_slope);
            skips.push(h);
        }
        let dropout_blocks = cfg.dropout_blocks.min(cfg.depth - 1);
        for j in 1..=cfg.depth {
            let level = cfg.depth - j;
            let (w, hh) = extents[level];
            let block = |e: Error| Error::shape("decoder block", format!("{j}: {e}"));
            h = h
                .conv2d_transpose(ctx.p(&format!("dec{j}.kernel"))?, cfg.stride, w, hh)
                .map_err(block)?;
            h = h.add(ctx.p(&format!("dec{j}.bias"))?)?;
            if level == 0 {
                h = h.sigmoid();
            } else {
                h = ctx.batch_norm(&format!("dec{j}.bn"), h)?.relu();
                if j <= dropout_blocks {
                    h = ctx.dropout(h, cfg.dropout)?;
                }
                h = Var::concat_last(&[h, skips[level - 1]])?;
            }
        }
        h.reshape(&[b, cfg.frames, cfg.bins])
    }

    /// Eval-mode mask for a batch of patches.
    pub fn predict_mask(&self, x: &Tensor<T>, z: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(&self.params, &bound, false, &mut rng);
        let zv = z.map(|z| tape.constant(z.clone()));
        let out = self.forward(&mut ctx, tape.constant(x.clone()), zv)?;
        let v = out.value();
        Ok((*v).clone())
    }

    /// Separate a mixture into vocals and accompaniment.
    ///
    /// The mixture is resampled to the model rate if needed, cut into
    /// non-overlapping patches, masked, and inverted with the mixture phase.
    /// The accompaniment is the residual, so `vocals + accompaniment` equals
    /// the (resampled) mixture. `mask_override` replaces the network output
    /// with a constant mask.
    pub fn separate(
        &self,
        mixture: &AudioClip,
        annotations: Option<&AnnotationSequence>,
        lexicon: &Lexicon,
        mask_override: Option<f32>,
    ) -> Result<(AudioClip, AudioClip)> {
        let cfg = &self.config;
        self.separate_with(
            mixture,
            |frames| annotations.map(|a| build_activation_matrix(a, lexicon, frames, &cfg.stft)),
            mask_override,
        )
    }

    /// [`separate`](Self::separate) with the phoneme matrix supplied by
    /// `phonemes(frames)`, for callers that transform it first.
    pub fn separate_with<F>(&self, mixture: &AudioClip, phonemes: F, mask_override: Option<f32>) -> Result<(AudioClip, AudioClip)>
    where
        F: FnOnce(usize) -> Option<ActivationMatrix>,
    {
        let cfg = &self.config;
        let mix = if mixture.sample_rate != cfg.stft.sample_rate {
            dsp::resample(mixture, cfg.stft.sample_rate)?
        } else {
            mixture.clone()
        };
        let spec = stft(&mix, &cfg.stft)?;
        let mag = spec.magnitude();
        let mask = match mask_override {
            Some(m) => vec![m; mag.len()],
            None => {
                let z = phonemes(spec.frames);
                if self.conditioning.is_conditioned() && z.is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "model {} is conditioned and needs lyric annotations",
                        self.variant()
                    )));
                }
                self.mask_for(&mag, spec.frames, z.as_ref())?
            }
        };
        let vocals_spec = apply_mask(&spec, &mask)?;
        let vocals = istft(&vocals_spec)?;
        let accompaniment = AudioClip {
            samples: mix.samples.iter().zip(&vocals.samples).map(|(m, v)| m - v).collect(),
            sample_rate: mix.sample_rate,
        };
        Ok((vocals, accompaniment))
    }

    /// Full-length mask for a `frames x bins` magnitude, evaluated patch by
    /// patch in parallel.
    pub fn mask_for(&self, magnitude: &[f32], frames: usize, z: Option<&ActivationMatrix>) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let patches = extract_patches(magnitude, frames, cfg.bins, cfg.frames)?;
        let masks = crate::parallel::map_slice(&patches, |p| -> Result<dsp::MagnitudePatch> {
            let x = Tensor::new(vec![1, cfg.frames, cfg.bins], p.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?;
            let zt = z.map(|z| z.window(p.offset, cfg.frames).reshape([1, cfg.frames, P]).map(|t| t.cast::<T>()));
            let zt = zt.transpose()?;
            let m = self.predict_mask(&x, zt.as_ref())?;
            Ok(dsp::MagnitudePatch {
                data: m.data().iter().map(|v| v.as_f64() as f32).collect(),
                ..p.clone()
            })
        });
        let masks = masks.into_iter().collect::<Result<Vec<_>>>()?;
        assemble_patches(&masks, frames, cfg.bins)
    }

    pub fn header(&self) -> ModelHeader {
        ModelHeader {
            variant: self.variant().to_string(),
            config: self.config,
            conditioning: self.conditioning,
            vocabulary: self.vocabulary.clone(),
        }
    }

    /// Write a checkpoint and its JSON sidecar (`<path>.json`).
    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerState<T>>, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "model": self.header() });
        if let (Some(obj), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
            obj.extend(extra);
        }
        checkpoint::save(path, &self.params, optimizer, &meta)?;
        let sidecar = serde_json::json!({
            "variant": self.variant().to_string(),
            "config": self.config,
            "conditioning": self.conditioning,
            "vocabulary": self.vocabulary,
            "parameters": self.count_parameters(),
            "metrics": meta.get("history").cloned().unwrap_or(serde_json::Value::Null),
            "epoch": meta.get("epoch").cloned().unwrap_or(serde_json::Value::Null),
            "best_val_loss": meta.get("best_val_loss").cloned().unwrap_or(serde_json::Value::Null),
        });
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Load a checkpoint, returning the model together with the raw file.
    pub fn load(path: &Path) -> Result<(Self, Checkpoint<T>)> {
        let ck = checkpoint::load::<T>(path)?;
        let header: ModelHeader = serde_json::from_value(
            ck.metadata
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing model header".into()))?,
        )?;
        if header.vocabulary != vocab::fingerprint() {
            return Err(Error::Checkpoint("phoneme vocabulary differs from this build".into()));
        }
        let fresh = Self::new(header.config, header.conditioning, 0)?;
        for (name, p) in fresh.params.iter() {
            let stored = ck.params.get(name)?;
            if stored.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if ck.params.len() != fresh.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        info!("loaded {} model from {}", header.variant, path.display());
        let model = SeparationModel {
            config: header.config,
            conditioning: header.conditioning,
            params: ck.params.clone(),
            vocabulary: header.vocabulary,
        };
        Ok((model, ck))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{BasisVariant, Insertion, WeakVariant};
    use rand::Rng;

    fn tiny(c: ConditioningConfig, seed: u64) -> SeparationModel<f64> {
        SeparationModel::new(UNetConfig::tiny(), c, seed).unwrap()
    }

    fn rand_input(b: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![b, 64, 64], (0..b * 64 * 64).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap();
        let z = Tensor::new(vec![b, 64, P], (0..b * 64 * P).map(|_| (rng.random::<f64>() < 0.1) as u8 as f64).collect()).unwrap();
        (x, z)
    }

    #[test]
    fn full_base_matches_reported_size() {
        let m = SeparationModel::<f32>::new(UNetConfig::full(), ConditioningConfig::none(), 0).unwrap();
        let n = m.count_parameters();
        assert!((n.total as f64 / 9.83e6 - 1.0).abs() < 0.01, "{n:?}");
        assert_eq!(n.backbone, n.total);
    }

    #[test]
    fn mask_shape_and_range() {
        let m = tiny(ConditioningConfig::strong(BasisVariant::Scalar, Insertion::Complete), 1);
        let (x, z) = rand_input(2, 2);
        let mask = m.predict_mask(&x, Some(&z)).unwrap();
        assert_eq!(mask.shape(), &[2, 64, 64]);
        assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.predict_mask(&x, None).is_err());
    }

    #[test]
    fn identity_weak_film_matches_unconditioned() {
        let base = tiny(ConditioningConfig::none(), 7);
        let mut weak = tiny(ConditioningConfig::weak(WeakVariant::Simple), 7);
        for head in ["control.gamma_head.w", "control.beta_head.w", "control.beta_head.b"] {
            let t = weak.params.tensor(head).unwrap().map(|_| 0.0);
            weak.params.set(head, t).unwrap();
        }
        let (x, z) = rand_input(2, 3);
        let a = base.predict_mask(&x, None).unwrap();
        let b = weak.predict_mask(&x, Some(&z)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn random_init_masks_center_on_half() {
        let mut means = Vec::new();
        for seed in 0..20 {
            let m = tiny(ConditioningConfig::none(), seed);
            let (x, _) = rand_input(1, 100 + seed);
            means.push(m.predict_mask(&x, None).unwrap().mean());
        }
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        assert!((0.3..=0.7).contains(&avg), "{avg}");
    }

    #[test]
    fn separation_conserves_mixture() {
        let m = SeparationModel::<f32>::new(UNetConfig::tiny(), ConditioningConfig::none(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mix = AudioClip::new((0..20000).map(|_| rng.random_range(-0.5..0.5)).collect(), 8192);
        let lex = Lexicon::builtin();
        let (v, a) = m.separate(&mix, None, &lex, None).unwrap();
        assert_eq!(v.len(), mix.len());
        let worst = (0..mix.len()).map(|i| (v.samples[i] + a.samples[i] - mix.samples[i]).abs()).fold(0.0, f32::max);
        assert!(worst < 1e-6, "{worst}");
        let (ones, rest) = m.separate(&mix, None, &lex, Some(1.0)).unwrap();
        // away from the first quarter-window, where the window sum vanishes
        let edge = m.config.stft.window / 4;
        let err = (edge..mix.len()).map(|i| (ones.samples[i] - mix.samples[i]).abs()).fold(0.0, f32::max);
        assert!(err < 1e-4, "{err}");
        assert!(rest.samples[edge..].iter().all(|s| s.abs() < 1e-4));
        let (zero, _) = m.separate(&mix, None, &lex, Some(0.0)).unwrap();
        assert!(zero.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn conditioned_model_needs_annotations() {
        let m = SeparationModel::<f32>::new(UNetConfig::tiny(), ConditioningConfig::weak(WeakVariant::Complex), 0).unwrap();
        let mix = AudioClip::new(vec![0.1; 9000], 8192);
        assert!(m.separate(&mix, None, &Lexicon::builtin(), None).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = SeparationModel::<f32>::new(UNetConfig::tiny(), ConditioningConfig::strong(BasisVariant::Channel, Insertion::Bottleneck), 5).unwrap();
        m.save(&path, None, serde_json::json!({"epoch": 2})).unwrap();
        assert!(sidecar_path(&path).exists());
        let (back, ck) = SeparationModel::<f32>::load(&path).unwrap();
        assert_eq!(back.conditioning, m.conditioning);
        assert_eq!(ck.metadata["epoch"], 2);
        for ((n1, p1), (n2, p2)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(p1.value.data(), p2.value.data());
        }
    }
}
