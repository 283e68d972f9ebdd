use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};

use phonosep::conditioning::ModelVariant;
use phonosep::dataset::{self, Manifest, ManifestEntry, Split, SplitConfig, SynthConfig};
use phonosep::dsp::{self, wav, AudioClip, StftConfig};
use phonosep::evaluation::{evaluate_tracks, EvalReport, TrackInput};
use phonosep::gradsuite::{self, SuiteResult};
use phonosep::phoneme::{build_activation_matrix, AnnotationSequence, Lexicon};
use phonosep::tensor::gradcheck::Precision;
use phonosep::training::{best_checkpoint, TrainConfig, Trainer, TrainingSet};
use phonosep::unet::{SeparationModel, UNetConfig};
use phonosep::parallel;

use crate::options::Options;
use crate::{require, Command, UsageError};

/// Gradient agreement required of every check.
const GRAD_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter tensor in whole-network checks.
const NETWORK_PROBES: usize = 6;

pub fn dispatch(command: Command, o: &Options) -> anyhow::Result<()> {
    match command {
        Command::SynthData => synth_data(o),
        Command::BuildSources => build_sources(o),
        Command::Split => split(o),
        Command::Train => train(o),
        Command::Separate => separate(o),
        Command::Evaluate => evaluate(o),
        Command::CountParams => count_params(o),
        Command::GradCheck => grad_check(o),
    }
}

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn variant(o: &Options) -> anyhow::Result<ModelVariant> {
    let name = o.variant.as_deref().unwrap_or("unet");
    name.parse().map_err(|_| {
        let known: Vec<String> = ModelVariant::ALL.iter().map(|v| v.to_string()).collect();
        usage(format!("unknown variant {name:?}; expected one of {}", known.join(", ")))
    })
}

fn preset(o: &Options) -> anyhow::Result<UNetConfig> {
    let name = o.preset.as_deref().unwrap_or("full");
    UNetConfig::preset(name).map_err(|e| usage(e.to_string()))
}

fn lexicon(o: &Options) -> anyhow::Result<Lexicon> {
    match &o.lexicon {
        Some(path) => Lexicon::load(path).with_context(|| format!("loading lexicon {}", path.display())),
        None => Ok(Lexicon::builtin()),
    }
}

fn positive(name: &str, value: Option<usize>, default: usize) -> anyhow::Result<usize> {
    match value.unwrap_or(default) {
        0 => Err(usage(format!("--{name} must be positive"))),
        v => Ok(v),
    }
}

fn synth_data(o: &Options) -> anyhow::Result<()> {
    let out = require!(o, out);
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        train: positive("train-songs", o.train_songs, defaults.train)?,
        validation: positive("validation-songs", o.validation_songs, defaults.validation)?,
        test: positive("test-songs", o.test_songs, defaults.test)?,
        duration_secs: o.duration.unwrap_or(defaults.duration_secs),
        seed: o.seed_or_default(),
    };
    if !(config.duration_secs >= 1.0 && config.duration_secs.is_finite()) {
        return Err(usage("--duration must be at least 1 second"));
    }
    let manifest = dataset::synth_generate(&config, &out, &lexicon(o)?)?;
    o.snapshot(&out)?;
    println!("wrote {} songs to {}", manifest.len(), out.display());
    Ok(())
}

fn build_sources(o: &Options) -> anyhow::Result<()> {
    let dir = require!(o, tracks);
    let out = require!(o, out);
    let profiles = dataset::load_profiles(&require!(o, profiles))?;
    let nu = o.nu.unwrap_or(dataset::DEFAULT_NU);
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(usage("--nu must lie in (0, 1]"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .wav tracks in {}", dir.display());
    }
    let tracks = paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, wav::read_wav(p)?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let sources = dataset::build_sources(&tracks, &profiles, nu)?;
    std::fs::create_dir_all(&out)?;
    wav::write_wav(&out.join("vocals.wav"), &sources.vocals)?;
    wav::write_wav(&out.join("accompaniment.wav"), &sources.accompaniment)?;
    wav::write_wav(&out.join("mixture.wav"), &sources.mixture)?;
    o.snapshot(&out)?;
    println!("vocal tracks: {}", sources.vocal_tracks.join(" "));
    Ok(())
}

fn split(o: &Options) -> anyhow::Result<()> {
    let manifest = Manifest::load(&require!(o, manifest))?;
    let out = require!(o, out);
    let outcome = dataset::split_by_agreement(&manifest, &SplitConfig::default());
    for (name, part) in [("train", &outcome.train), ("validation", &outcome.validation), ("test", &outcome.test)] {
        part.save(&out.join(format!("{name}.tsv")))?;
        println!("{name}\t{}", part.len());
    }
    let all = Manifest::new(
        [&outcome.train, &outcome.validation, &outcome.test]
            .iter()
            .flat_map(|m| m.entries.iter().cloned())
            .collect(),
    );
    all.save(&out.join("all.tsv"))?;
    let mut excluded = outcome.excluded.join("\n");
    if !excluded.is_empty() {
        excluded.push('\n');
    }
    std::fs::write(out.join("excluded.txt"), &excluded)?;
    println!("excluded\t{}", outcome.excluded.len());
    for id in &outcome.excluded {
        println!("  {id}");
    }
    o.snapshot(&out)?;
    Ok(())
}

fn split_part(manifest: &Manifest, split: Split) -> anyhow::Result<Manifest> {
    let part = manifest.with_split(split);
    if part.is_empty() {
        bail!("manifest has no {split} songs; tag them with `split` first");
    }
    Ok(part)
}

fn train(o: &Options) -> anyhow::Result<()> {
    let manifest = Manifest::load(&require!(o, manifest))?;
    let out = require!(o, out);
    let seed = o.seed_or_default();
    let mut trainer = match &o.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(path)?;
            if let Some(epochs) = o.epochs {
                t.config.max_epochs = epochs;
            }
            info!("resuming {} at epoch {}", t.model.variant(), t.epoch);
            t
        }
        None => {
            let defaults = TrainConfig::default();
            let config = TrainConfig {
                batch_size: o.batch_size.unwrap_or(defaults.batch_size),
                batches_per_epoch: o.batches_per_epoch.unwrap_or(defaults.batches_per_epoch),
                validation_batches: o.validation_batches.unwrap_or(defaults.validation_batches),
                max_epochs: o.epochs.unwrap_or(defaults.max_epochs),
                lr: o.lr.unwrap_or(defaults.lr),
                seed,
                ..defaults
            };
            config.validate().map_err(|e| usage(e.to_string()))?;
            let model = SeparationModel::new(preset(o)?, variant(o)?.conditioning(), seed)?;
            Trainer::new(model, config)?
        }
    };
    let lex = lexicon(o)?;
    let cfg = trainer.model.config;
    let mut train_set = TrainingSet::load(&split_part(&manifest, Split::Train)?, &lex, cfg.stft, cfg.frames)?;
    let mut val_set = TrainingSet::load(&split_part(&manifest, Split::Validation)?, &lex, cfg.stft, cfg.frames)?;
    if o.shuffle_phonemes == Some(true) {
        train_set.shuffle_phoneme_columns(seed);
        val_set.shuffle_phoneme_columns(seed.wrapping_add(1));
    }
    o.snapshot(&out)?;
    let outcome = trainer.run(&train_set, &val_set, Some(&out))?;
    println!(
        "{} epochs, best validation loss {}, {}",
        outcome.history.len(),
        outcome.best_val_loss.map_or("NA".into(), |l| format!("{l:.6}")),
        if outcome.stopped_early { "stopped early" } else { "epoch limit reached" },
    );
    println!("best checkpoint: {}", best_checkpoint(&out).display());
    Ok(())
}

/// A checkpoint, or an untrained unconditioned model when only the mask
/// override matters.
fn model_for_separation(o: &Options) -> anyhow::Result<SeparationModel<f32>> {
    if let Some(m) = o.mask_override {
        if !(0.0..=1.0).contains(&m) {
            return Err(usage("--mask-override must lie in [0, 1]"));
        }
    }
    match (&o.model, o.mask_override) {
        (Some(path), _) => Ok(SeparationModel::load(path)?.0),
        (None, Some(_)) => Ok(SeparationModel::new(preset(o)?, ModelVariant::Unet.conditioning(), 0)?),
        (None, None) => Err(usage("missing required option --model (or --mask-override)")),
    }
}

fn separate_clip(
    model: &SeparationModel<f32>,
    mixture: &AudioClip,
    annotations: Option<&AnnotationSequence>,
    lexicon: &Lexicon,
    shuffle_seed: Option<u64>,
    mask_override: Option<f32>,
) -> anyhow::Result<(AudioClip, AudioClip)> {
    let stft = model.config.stft;
    let phonemes = |frames| {
        annotations.map(|a| {
            let z = build_activation_matrix(a, lexicon, frames, &stft);
            match shuffle_seed {
                Some(seed) => z.shuffled_seeded(seed),
                None => z,
            }
        })
    };
    Ok(model.separate_with(mixture, phonemes, mask_override)?)
}

fn separate(o: &Options) -> anyhow::Result<()> {
    let mixture = wav::read_wav(&require!(o, mixture))?;
    let out = require!(o, out);
    let model = model_for_separation(o)?;
    let annotations = o.annotations.as_deref().map(AnnotationSequence::load).transpose()?;
    let shuffle = (o.shuffle_phonemes == Some(true)).then(|| o.seed_or_default());
    let (vocals, accompaniment) = separate_clip(&model, &mixture, annotations.as_ref(), &lexicon(o)?, shuffle, o.mask_override)?;
    std::fs::create_dir_all(&out)?;
    wav::write_wav(&out.join("vocals.wav"), &vocals)?;
    wav::write_wav(&out.join("accompaniment.wav"), &accompaniment)?;
    o.snapshot(&out)?;
    println!("wrote {} and {}", out.join("vocals.wav").display(), out.join("accompaniment.wav").display());
    Ok(())
}

fn at_rate(clip: AudioClip, rate: u32) -> anyhow::Result<AudioClip> {
    Ok(if clip.sample_rate == rate { clip } else { dsp::resample(&clip, rate)? })
}

/// References and estimates of one song at the estimates' sample rate.
fn track_input(entry: &ManifestEntry, estimate: (AudioClip, AudioClip)) -> anyhow::Result<(TrackInput, u32)> {
    let rate = estimate.0.sample_rate;
    if estimate.1.sample_rate != rate {
        bail!("song {}: estimates have different sample rates", entry.id);
    }
    let vocals = at_rate(wav::read_wav(&entry.vocals)?, rate)?;
    let accompaniment = at_rate(wav::read_wav(&entry.accompaniment)?, rate)?;
    let input = TrackInput {
        id: entry.id.clone(),
        vocals: vocals.samples,
        accompaniment: accompaniment.samples,
        est_vocals: estimate.0.samples,
        est_accompaniment: estimate.1.samples,
    };
    Ok((input, rate))
}

fn read_estimates(dir: &Path) -> anyhow::Result<(AudioClip, AudioClip)> {
    Ok((wav::read_wav(&dir.join("vocals.wav"))?, wav::read_wav(&dir.join("accompaniment.wav"))?))
}

fn evaluate(o: &Options) -> anyhow::Result<()> {
    let manifest = Manifest::load(&require!(o, manifest))?;
    let mut songs = manifest.with_split(Split::Test);
    if songs.is_empty() {
        warn!("manifest has no test split; evaluating all {} songs", manifest.len());
        songs = manifest;
    }
    if songs.is_empty() {
        bail!("no songs to evaluate");
    }
    let lex = lexicon(o)?;
    let seed = o.seed_or_default();
    let shuffle = o.shuffle_phonemes == Some(true);
    let tracks: Vec<anyhow::Result<(TrackInput, u32)>> = match (&o.model, &o.estimates) {
        (Some(_), Some(_)) => return Err(usage("give either --model or --estimates, not both")),
        (None, Some(dir)) => parallel::map_slice(&songs.entries, |e| track_input(e, read_estimates(&dir.join(&e.id))?)),
        (_, None) => {
            let model = model_for_separation(o)?;
            parallel::map_range(songs.len(), |i| {
                let e = &songs.entries[i];
                let mixture = wav::read_wav(&e.mixture)?;
                let ann = e.annotation.as_deref().map(AnnotationSequence::load).transpose()?;
                let shuffle_seed = shuffle.then(|| seed.wrapping_add(i as u64));
                let est = separate_clip(&model, &mixture, ann.as_ref(), &lex, shuffle_seed, o.mask_override)?;
                track_input(e, est)
            })
        }
    };
    let (inputs, rates): (Vec<TrackInput>, Vec<u32>) = tracks.into_iter().collect::<anyhow::Result<Vec<_>>>()?.into_iter().unzip();
    if rates.iter().any(|&r| r != rates[0]) {
        bail!("estimates come at different sample rates");
    }
    let frames = StftConfig {
        sample_rate: rates[0],
        ..StftConfig::default()
    };
    let mut report = EvalReport::new(evaluate_tracks(&inputs, &frames)?);
    if let Some(path) = &o.baseline {
        report.compare(&EvalReport::load_tsv(path)?);
    }
    if let Some(out) = &o.out {
        report.save(out)?;
        o.snapshot(out)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn count_params(o: &Options) -> anyhow::Result<()> {
    let config = preset(o)?;
    if let Some(path) = &o.model {
        let (model, _) = SeparationModel::<f32>::load(path)?;
        let c = model.count_parameters();
        println!("variant\ttotal\tbackbone\tcontrol\tbasis\tbuffers");
        println!("{}\t{}\t{}\t{}\t{}\t{}", model.variant(), c.total, c.backbone, c.control, c.basis, c.buffers);
        return Ok(());
    }
    let variants: Vec<ModelVariant> = match &o.variant {
        Some(_) => vec![variant(o)?],
        None => ModelVariant::ALL.to_vec(),
    };
    let base = SeparationModel::<f32>::new(config, ModelVariant::Unet.conditioning(), 0)?.count_parameters().total;
    println!("{:<8}{:>12}{:>12}{:>12}{:>10}{:>10}{:>10}", "variant", "total", "increment", "backbone", "control", "basis", "buffers");
    for v in variants {
        let c = SeparationModel::<f32>::new(config, v.conditioning(), 0)?.count_parameters();
        println!(
            "{:<8}{:>12}{:>12}{:>12}{:>10}{:>10}{:>10}",
            v.to_string(),
            c.total,
            c.total - base,
            c.backbone,
            c.control,
            c.basis,
            c.buffers
        );
    }
    Ok(())
}

fn precision(o: &Options) -> anyhow::Result<Precision> {
    match o.precision.as_deref().unwrap_or("f32") {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(usage(format!("unknown precision {other:?} (f32 | f64)"))),
    }
}

fn grad_check(o: &Options) -> anyhow::Result<()> {
    let first = o.seed_or_default();
    let count = positive("seeds", o.seeds, 1)?;
    let seeds: Vec<u64> = (first..first + count as u64).collect();
    let results = gradsuite::run_suite(&seeds, precision(o)?, NETWORK_PROBES)?;
    let failed = report_grad_checks(&results, &mut std::io::stdout().lock())?;
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    Ok(())
}

/// One line per case and precision with the worst error over seeds;
/// returns the number of failing checks.
fn report_grad_checks(results: &[SuiteResult], out: &mut impl std::io::Write) -> anyhow::Result<usize> {
    let mut rows: Vec<(String, Precision, f64, f64, usize, usize)> = Vec::new();
    for r in results {
        let key = (r.case.clone(), r.report.precision);
        let pass = r.passes(GRAD_TOLERANCE);
        match rows.iter_mut().find(|row| (row.0.clone(), row.1) == key) {
            Some(row) => {
                row.2 = row.2.max(r.report.max_rel_error);
                row.3 = row.3.max(r.report.norm_rel_error);
                row.4 += 1;
                row.5 += usize::from(!pass);
            }
            None => rows.push((key.0, key.1, r.report.max_rel_error, r.report.norm_rel_error, 1, usize::from(!pass))),
        }
    }
    let mut failed = 0;
    for (case, p, rel, norm, n, fails) in rows {
        failed += fails;
        let status = if fails == 0 { "PASS" } else { "FAIL" };
        let p = match p {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        writeln!(out, "{status} {case:<22} {p} seeds={n} max_rel={rel:.2e} norm_rel={norm:.2e}")?;
    }
    Ok(failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse_and_unknown_is_usage() {
        let o = Options {
            variant: Some("s_a*".into()),
            ..Options::default()
        };
        assert_eq!(variant(&o).unwrap().to_string(), "S_a*");
        let bad = Options {
            variant: Some("S_x".into()),
            ..Options::default()
        };
        assert!(variant(&bad).unwrap_err().downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn mask_override_without_model_uses_preset() {
        let o = Options {
            mask_override: Some(1.0),
            preset: Some("tiny".into()),
            ..Options::default()
        };
        let m = model_for_separation(&o).unwrap();
        assert_eq!(m.config, UNetConfig::tiny());
        let none = Options::default();
        assert!(model_for_separation(&none).unwrap_err().downcast_ref::<UsageError>().is_some());
        let out_of_range = Options {
            mask_override: Some(1.5),
            ..Options::default()
        };
        assert!(model_for_separation(&out_of_range).is_err());
    }

    #[test]
    fn grad_report_groups_by_case() {
        let results = gradsuite::run_suite(&[0, 1], Precision::F64, 2).unwrap();
        let mut buf = Vec::new();
        let failed = report_grad_checks(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(failed, 0, "{text}");
        assert!(text.lines().all(|l| l.starts_with("PASS")));
        assert!(text.contains("seeds=2"));
        assert_eq!(text.lines().count(), 31 + 2);
    }
}
