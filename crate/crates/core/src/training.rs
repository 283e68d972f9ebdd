//! Batch sampling, mix augmentation, learning-rate schedules and the trainer.
//!
//! A run directory holds:
//!
//! - `config.json`: the training configuration and model header
//! - `metrics.tsv`: one `epoch  train_loss  val_loss  lr` record per epoch
//! - `last.ckpt` and `best.ckpt` (each with a `.json` sidecar)
//! - `nan.ckpt`, written only when a non-finite loss aborts the run

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::dsp::{self, stft, AudioClip, MagnitudePatch, StftConfig};
use crate::error::{Error, Result};
use crate::parallel;
use crate::phoneme::{build_activation_matrix, ActivationMatrix, AnnotationSequence, Lexicon, P};
use crate::tensor::{Adam, Tape, Tensor};
use crate::unet::{apply_bn_updates, ForwardCtx, SeparationModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    /// One augmented sample is inserted after every `augment_every - 1` real
    /// ones; 0 disables augmentation.
    pub augment_every: usize,
    pub validation_batches: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            batches_per_epoch: 1024,
            lr: 1e-3,
            plateau_patience: 15,
            plateau_factor: 0.5,
            early_stop_patience: 30,
            min_delta: 1e-5,
            augment_every: 5,
            validation_batches: 256,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("batches_per_epoch", self.batches_per_epoch),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("validation_batches", self.validation_batches),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.augment_every == 1 {
            return Err(Error::InvalidArgument("augment_every must be 0 or at least 2".into()));
        }
        if !(self.lr > 0.0) || !(self.min_delta >= 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::InvalidArgument("lr > 0, min_delta >= 0 and plateau_factor in (0, 1) required".into()));
        }
        Ok(())
    }
}

/// Spectrograms and waveforms of one song, ready for patch sampling.
#[derive(Clone, Debug)]
pub struct SongData {
    pub id: String,
    pub frames: usize,
    pub bins: usize,
    /// Row-major `frames x bins` magnitudes.
    pub mixture: Vec<f32>,
    pub vocals: Vec<f32>,
    pub vocal_wave: Vec<f32>,
    pub accompaniment_wave: Vec<f32>,
    pub activation: ActivationMatrix,
}

impl SongData {
    pub fn from_audio(
        id: &str,
        mixture: &AudioClip,
        vocals: &AudioClip,
        accompaniment: &AudioClip,
        annotation: Option<&AnnotationSequence>,
        lexicon: &Lexicon,
        config: &StftConfig,
    ) -> Result<Self> {
        let fit = |a: &AudioClip| -> Result<AudioClip> {
            if a.sample_rate == config.sample_rate {
                Ok(a.clone())
            } else {
                dsp::resample(a, config.sample_rate)
            }
        };
        let (mixture, vocals, accompaniment) = (fit(mixture)?, fit(vocals)?, fit(accompaniment)?);
        let mix_spec = stft(&mixture, config)?;
        let voc_spec = stft(&vocals, config)?;
        if voc_spec.frames != mix_spec.frames {
            warn!("song {id}: vocals and mixture lengths differ");
        }
        let frames = mix_spec.frames.min(voc_spec.frames);
        let bins = mix_spec.bins;
        let activation = match annotation {
            Some(a) => build_activation_matrix(a, lexicon, frames, config),
            None => ActivationMatrix::silent(frames),
        };
        let mut mixture_mag = mix_spec.magnitude();
        mixture_mag.truncate(frames * bins);
        let mut vocals_mag = voc_spec.magnitude();
        vocals_mag.truncate(frames * bins);
        Ok(SongData {
            id: id.to_string(),
            frames,
            bins,
            mixture: mixture_mag,
            vocals: vocals_mag,
            vocal_wave: vocals.samples,
            accompaniment_wave: accompaniment.samples,
            activation,
        })
    }

    /// Number of patch start positions (at least one, zero-padded).
    pub fn positions(&self, patch_frames: usize) -> usize {
        self.frames.saturating_sub(patch_frames) + 1
    }

    fn patch(&self, mag: &[f32], offset: usize, n: usize) -> MagnitudePatch {
        let mut data = vec![0f32; n * self.bins];
        let end = (offset + n).min(self.frames);
        if end > offset {
            data[..(end - offset) * self.bins].copy_from_slice(&mag[offset * self.bins..end * self.bins]);
        }
        MagnitudePatch {
            offset,
            frames: n,
            bins: self.bins,
            data,
        }
    }
}

/// Songs indexed by `(song, offset)` patch positions.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub songs: Vec<SongData>,
    pub patch_frames: usize,
    pub stft: StftConfig,
    cumulative: Vec<usize>,
}

impl TrainingSet {
    pub fn new(songs: Vec<SongData>, patch_frames: usize, stft: StftConfig) -> Result<Self> {
        if songs.is_empty() {
            return Err(Error::Dataset("training set has no songs".into()));
        }
        if songs.iter().any(|s| s.bins != stft.bins()) {
            return Err(Error::Dataset("song spectrograms do not match the STFT configuration".into()));
        }
        let mut cumulative = Vec::with_capacity(songs.len());
        let mut total = 0;
        for s in &songs {
            total += s.positions(patch_frames);
            cumulative.push(total);
        }
        Ok(TrainingSet {
            songs,
            patch_frames,
            stft,
            cumulative,
        })
    }

    /// Load every manifest entry, in parallel. Songs without annotations get
    /// an all-silent phoneme matrix.
    pub fn load(manifest: &Manifest, lexicon: &Lexicon, stft: StftConfig, patch_frames: usize) -> Result<Self> {
        let songs = parallel::map_slice(&manifest.entries, |e| -> Result<SongData> {
            let read = |p: &Path| dsp::wav::read_wav(p);
            let annotation = match &e.annotation {
                Some(p) => Some(AnnotationSequence::load(p)?),
                None => {
                    warn!("song {} has no annotation; using a silent phoneme matrix", e.id);
                    None
                }
            };
            SongData::from_audio(
                &e.id,
                &read(&e.mixture)?,
                &read(&e.vocals)?,
                &read(&e.accompaniment)?,
                annotation.as_ref(),
                lexicon,
                &stft,
            )
        });
        Self::new(songs.into_iter().collect::<Result<_>>()?, patch_frames, stft)
    }

    pub fn total_positions(&self) -> usize {
        *self.cumulative.last().unwrap_or(&0)
    }

    /// Map a global position index to `(song, offset)`.
    pub fn position(&self, k: usize) -> (usize, usize) {
        let song = self.cumulative.partition_point(|&c| c <= k);
        let before = if song == 0 { 0 } else { self.cumulative[song - 1] };
        (song, k - before)
    }

    /// Uniform draw over all patch positions of all songs.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        self.position(rng.random_range(0..self.total_positions()))
    }

    /// Replace every song's phoneme matrix by a random permutation of all its
    /// columns (one permutation per song), for shuffled-conditioning controls.
    pub fn shuffle_phoneme_columns(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut self.songs {
            s.activation = s.activation.shuffled(&mut rng);
        }
    }

    pub fn real_sample(&self, song: usize, offset: usize) -> TrainSample {
        let s = &self.songs[song];
        let n = self.patch_frames;
        TrainSample {
            mixture: s.patch(&s.mixture, offset, n),
            vocals: s.patch(&s.vocals, offset, n),
            phonemes: s.activation.window(offset, n),
            provenance: Provenance::Real,
        }
    }

    /// Waveform span covering frames `offset..offset + n`.
    fn segment(&self, wave: &[f32], offset: usize) -> Vec<f32> {
        let len = (self.patch_frames - 1) * self.stft.hop + self.stft.window;
        let start = offset * self.stft.hop;
        (0..len).map(|i| wave.get(start + i).copied().unwrap_or(0.0)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Augmented,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub mixture: MagnitudePatch,
    pub vocals: MagnitudePatch,
    /// Binary `[N, P]` phoneme window.
    pub phonemes: Tensor<f32>,
    pub provenance: Provenance,
}

/// Magnitudes of `vocals + accompaniment` for the first `n` frames.
pub fn mix_magnitude(vocals: &[f32], accompaniment: &[f32], n: usize, config: &StftConfig) -> Result<Vec<f32>> {
    let mix: Vec<f32> = vocals.iter().zip(accompaniment).map(|(v, a)| v + a).collect();
    let spec = stft(&AudioClip::new(mix, config.sample_rate), config)?;
    let mut mag = spec.magnitude();
    mag.resize(n * spec.bins, 0.0);
    Ok(mag)
}

/// A fake training sample: the vocals at `(song, offset)` added in the time
/// domain to a random accompaniment segment from `pool`. Target and phonemes
/// are the vocals' own.
pub fn augment(set: &TrainingSet, song: usize, offset: usize, pool: &TrainingSet, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let (asong, aoffset) = pool.draw(rng);
    let v = set.segment(&set.songs[song].vocal_wave, offset);
    let a = pool.segment(&pool.songs[asong].accompaniment_wave, aoffset);
    let real = set.real_sample(song, offset);
    let data = mix_magnitude(&v, &a, set.patch_frames, &set.stft)?;
    Ok(TrainSample {
        mixture: MagnitudePatch { data, ..real.mixture },
        provenance: Provenance::Augmented,
        ..real
    })
}

/// Counts samples across batches so that exactly one in `augment_every` is
/// augmented, regardless of batch boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    pub counter: u64,
    pub augment_every: usize,
}

impl BatchSampler {
    pub fn new(augment_every: usize) -> Self {
        BatchSampler { counter: 0, augment_every }
    }

    pub fn is_augmented(&self, index: u64) -> bool {
        self.augment_every > 1 && index % self.augment_every as u64 == self.augment_every as u64 - 1
    }

    /// Draw `size` samples. With `augment` off (validation) every sample is
    /// real and the counter does not advance.
    pub fn sample_batch(&mut self, set: &TrainingSet, size: usize, augment: bool, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
        if set.total_positions() == 0 {
            return Err(Error::Dataset("cannot sample from an empty training set".into()));
        }
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            let (song, offset) = set.draw(rng);
            if augment && self.is_augmented(self.counter) {
                out.push(augment_sample(set, song, offset, rng)?);
            } else {
                out.push(set.real_sample(song, offset));
            }
            if augment {
                self.counter += 1;
            }
        }
        Ok(out)
    }
}

fn augment_sample(set: &TrainingSet, song: usize, offset: usize, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    augment(set, song, offset, set, rng)
}

/// Stacked model inputs for one batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub z: Tensor<f32>,
    pub augmented: usize,
}

impl Batch {
    pub fn from_samples(samples: &[TrainSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (n, m) = (first.mixture.frames, first.mixture.bins);
        let b = samples.len();
        let mut x = Vec::with_capacity(b * n * m);
        let mut y = Vec::with_capacity(b * n * m);
        let mut z = Vec::with_capacity(b * n * P);
        for s in samples {
            x.extend_from_slice(&s.mixture.data);
            y.extend_from_slice(&s.vocals.data);
            z.extend_from_slice(s.phonemes.data());
        }
        Ok(Batch {
            x: Tensor::new(vec![b, n, m], x)?,
            y: Tensor::new(vec![b, n, m], y)?,
            z: Tensor::new(vec![b, n, P], z)?,
            augmented: samples.iter().filter(|s| s.provenance == Provenance::Augmented).count(),
        })
    }
}

/// Halve (by `factor`) the learning rate after `patience` epochs without an
/// improvement larger than `min_delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub wait: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> Self {
        ReduceOnPlateau {
            factor,
            patience,
            min_delta,
            best: None,
            wait: 0,
        }
    }

    /// Record one epoch's validation loss; returns the learning rate to use next.
    pub fn update(&mut self, loss: f64, lr: f64) -> f64 {
        if improved(self.best, loss, self.min_delta) {
            self.best = Some(loss);
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return lr * self.factor;
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            wait: 0,
        }
    }

    /// Record one epoch's validation loss; `true` means stop now.
    pub fn update(&mut self, loss: f64) -> bool {
        if improved(self.best, loss, self.min_delta) {
            self.best = Some(loss);
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.wait >= self.patience
    }
}

fn improved(best: Option<f64>, loss: f64, min_delta: f64) -> bool {
    best.is_none_or(|b| loss < b - min_delta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything besides parameters and optimizer moments needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: TrainConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    history: Vec<EpochRecord>,
    rng: RngState,
    sampler: BatchSampler,
    plateau: ReduceOnPlateau,
    early: EarlyStopping,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub model: SeparationModel<f32>,
    pub config: TrainConfig,
    pub optimizer: Adam<f32>,
    pub plateau: ReduceOnPlateau,
    pub early: EarlyStopping,
    pub sampler: BatchSampler,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    rng: ChaCha8Rng,
    validation: Option<Vec<Batch>>,
}

impl Trainer {
    pub fn new(model: SeparationModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Trainer {
            model,
            optimizer: Adam::new(config.lr),
            plateau: ReduceOnPlateau::new(config.plateau_factor, config.plateau_patience, config.min_delta),
            early: EarlyStopping::new(config.early_stop_patience, config.min_delta),
            sampler: BatchSampler::new(config.augment_every),
            epoch: 0,
            history: Vec::new(),
            best_val_loss: None,
            rng,
            validation: None,
            config,
        })
    }

    /// Resume from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (model, ck) = SeparationModel::<f32>::load(path)?;
        let state: TrainerState = serde_json::from_value(
            ck.metadata
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no trainer state".into()))?,
        )?;
        let optimizer = match ck.optimizer {
            Some(s) => Adam::from_state(s),
            None => return Err(Error::Checkpoint("checkpoint has no optimizer state".into())),
        };
        Ok(Trainer {
            model,
            optimizer,
            plateau: state.plateau,
            early: state.early,
            sampler: state.sampler,
            epoch: state.epoch,
            history: state.history,
            best_val_loss: state.best_val_loss,
            rng: state.rng.restore()?,
            validation: None,
            config: state.config,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let state = TrainerState {
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            history: self.history.clone(),
            rng: RngState::capture(&self.rng),
            sampler: self.sampler,
            plateau: self.plateau,
            early: self.early,
        };
        let extra = serde_json::json!({
            "trainer": state,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "history": self.history,
        });
        self.model.save(path, Some(self.optimizer.state()), extra)
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr()
    }

    pub fn next_batch(&mut self, set: &TrainingSet) -> Result<Batch> {
        let samples = self.sampler.sample_batch(set, self.config.batch_size, true, &mut self.rng)?;
        Batch::from_samples(&samples)
    }

    /// Training-mode L1 loss of `batch` without updating anything except the
    /// dropout random stream.
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape);
        let mut ctx = ForwardCtx::new(&self.model.params, &bound, true, &mut self.rng);
        let loss = batch_l1(&self.model, &mut ctx, &tape, batch)?;
        Ok(loss.value().item() as f64)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.model.params.bind(&tape);
        let mut ctx = ForwardCtx::new(&self.model.params, &bound, true, &mut self.rng);
        let loss = batch_l1(&self.model, &mut ctx, &tape, batch)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: 0,
            });
        }
        let updates = std::mem::take(&mut ctx.bn_updates);
        drop(ctx);
        let grads = tape.backward(loss)?;
        self.optimizer.step(&mut self.model.params, &grads)?;
        apply_bn_updates(&mut self.model.params, &updates)?;
        Ok(value)
    }

    /// Draw the fixed validation batches (no augmentation) from `set`.
    pub fn freeze_validation(&mut self, set: &TrainingSet) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(3);
        let mut sampler = BatchSampler::new(0);
        let batches = (0..self.config.validation_batches)
            .map(|_| Batch::from_samples(&sampler.sample_batch(set, self.config.batch_size, false, &mut rng)?))
            .collect::<Result<Vec<_>>>()?;
        self.validation = Some(batches);
        Ok(())
    }

    /// Mean eval-mode L1 loss over the frozen validation batches.
    pub fn validation_loss(&self) -> Result<f64> {
        let batches = self
            .validation
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("validation batches not frozen".into()))?;
        let conditioned = self.model.conditioning.is_conditioned();
        let losses = parallel::map_slice(batches, |b| -> Result<f64> {
            let mask = self.model.predict_mask(&b.x, conditioned.then_some(&b.z))?;
            let total: f64 = mask
                .data()
                .iter()
                .zip(b.x.data())
                .zip(b.y.data())
                .map(|((&m, &x), &y)| ((m * x) as f64 - y as f64).abs())
                .sum();
            Ok(total / b.x.len() as f64)
        });
        let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Train until early stopping or `max_epochs`, writing to `run_dir` if given.
    pub fn run(&mut self, train: &TrainingSet, validation: &TrainingSet, run_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            let snapshot = serde_json::json!({ "train": self.config, "model": self.model.header() });
            std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&snapshot)?)?;
            let metrics = dir.join("metrics.tsv");
            if !metrics.exists() || self.epoch == 0 {
                std::fs::write(&metrics, "epoch\ttrain_loss\tval_loss\tlr\n")?;
            }
        }
        self.freeze_validation(validation)?;
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            self.epoch += 1;
            let mut total = 0.0;
            for b in 0..self.config.batches_per_epoch {
                let batch = self.next_batch(train)?;
                match self.step(&batch) {
                    Ok(l) => total += l,
                    Err(Error::NonFiniteLoss { .. }) => {
                        if let Some(dir) = run_dir {
                            self.save_checkpoint(&dir.join("nan.ckpt"))?;
                        }
                        return Err(Error::NonFiniteLoss { epoch: self.epoch, batch: b });
                    }
                    Err(e) => return Err(e),
                }
            }
            let train_loss = total / self.config.batches_per_epoch as f64;
            let val_loss = self.validation_loss()?;
            let lr = self.lr();
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_loss,
                lr,
            };
            self.history.push(record);
            info!("epoch {}: train {train_loss:.6} val {val_loss:.6} lr {lr:.2e}", self.epoch);
            let new_lr = self.plateau.update(val_loss, lr);
            if new_lr < lr {
                info!("validation plateau: learning rate {lr:.2e} -> {new_lr:.2e}");
                self.optimizer.set_lr(new_lr);
            }
            let is_best = self.best_val_loss.is_none_or(|b| val_loss < b);
            if is_best {
                self.best_val_loss = Some(val_loss);
            }
            let stop = self.early.update(val_loss);
            if let Some(dir) = run_dir {
                let mut f = std::fs::OpenOptions::new().append(true).open(dir.join("metrics.tsv"))?;
                writeln!(f, "{}\t{train_loss}\t{val_loss}\t{lr}", self.epoch)?;
                self.save_checkpoint(&dir.join("last.ckpt"))?;
                if is_best {
                    self.save_checkpoint(&dir.join("best.ckpt"))?;
                }
            }
            if stop {
                info!("early stopping at epoch {}", self.epoch);
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            history: self.history.clone(),
            best_val_loss: self.best_val_loss,
            stopped_early,
        })
    }
}

fn batch_l1<'t>(
    model: &SeparationModel<f32>,
    ctx: &mut ForwardCtx<'_, 't, f32>,
    tape: &'t Tape<f32>,
    batch: &Batch,
) -> Result<crate::tensor::Var<'t, f32>> {
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let z = model.conditioning.is_conditioned().then(|| tape.constant(batch.z.clone()));
    let mask = model.forward(ctx, x, z)?;
    mask.mul(x)?.mean_abs_error(y)
}

pub fn best_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("best.ckpt")
}
